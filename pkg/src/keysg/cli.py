"""``keysg`` command line: build, query, inspect, eval, serve.

Exit codes: 0 success; 1 fatal error (stage-tagged message on stderr);
2 partial build (some provider calls failed) or usage error; 3 query
answered without a valid grounding id.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import BuildConfig, load_config
from .errors import KeySGError, SchemaError

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL, EXIT_UNGROUNDED = 0, 1, 2, 3

log = logging.getLogger("keysg")


def _config(args) -> BuildConfig:
    cfg = load_config(args.config)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise KeyError(f"--set expects section.key=value, got {item!r}")
        cfg.override(key.strip(), value.strip())
    return cfg


def _provider(args, cfg: BuildConfig, fixtures=None):
    from .providers import make_provider

    guard, cache = make_provider(
        mock=args.mock, fixtures=fixtures, providers_toml=args.providers, cache_dir=args.cache_dir, cfg=cfg.providers
    )
    return (cache or guard), guard


def _fail(stage: str, msg: str) -> int:
    print(f"error [{stage}]: {msg}", file=sys.stderr)
    return EXIT_FATAL


# ---------------------------------------------------------------- commands


def cmd_build(args) -> int:
    from .pipeline import build

    try:
        cfg = _config(args)
    except (KeyError, TypeError, ValueError, OSError) as exc:
        return _fail("config", str(exc))
    try:
        provider, guard = _provider(args, cfg, Path(args.input) / "fixtures.json")
        graph, blog = build(args.input, args.out, cfg, provider, args.jobs, stats=guard.stats)
    except KeySGError as exc:
        return _fail(exc.stage, str(exc))
    except (OSError, ValueError) as exc:
        return _fail("build", str(exc))
    counts = graph.counts()
    print(json.dumps({"out": str(args.out), "counts": counts, "partial": blog.partial}, sort_keys=True))
    return EXIT_PARTIAL if blog.partial else EXIT_OK


def _load(args):
    from .graph import load_graph
    from .ragindex import load_index

    return load_graph(args.graph), load_index(args.graph)


def cmd_query(args) -> int:
    from .ragindex import answer, retrieve_hierarchical

    cfg = BuildConfig()
    try:
        graph, index = _load(args)
        cfg.update({k: v for k, v in graph.metadata.get("config", {}).items() if k in ("rag",)})
        provider, _ = _provider(args, cfg)
    except (KeySGError, OSError, ValueError, KeyError) as exc:
        return _fail(getattr(exc, "stage", "load"), str(exc))
    try:
        res = answer(args.text, graph, index, provider, cfg.rag.k, cfg.rag.token_budget, cfg.rag.image_cost,
                     parse=args.mode == "parsed")
        hier = retrieve_hierarchical(args.text, graph, index, provider, args.mode, cfg.rag.beam_width, cfg.rag.k)
    except KeySGError as exc:
        return _fail(exc.stage, str(exc))
    res["trace"]["hierarchical"] = {"ranked": hier.ranked, **hier.trace}
    if args.json:
        print(json.dumps(res, sort_keys=True, indent=1))
    else:
        print(res["text"])
        print("grounded:", " ".join(res["node_ids"]) or "-")
    if res.get("warning") == "ungrounded":
        print("warning: answer cited no node id; falling back to the top retrieval result", file=sys.stderr)
        return EXIT_UNGROUNDED
    return EXIT_OK


def _rasterize(rooms, cell: float = 0.05) -> np.ndarray:
    from .hierseg import point_in_polygon

    rings = [np.concatenate(r.polygon) for r in rooms if r.polygon]
    if not rings:
        return np.zeros((1, 1), np.uint8)
    allpts = np.concatenate(rings)
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    nx, ny = (np.ceil((hi - lo) / cell).astype(int) + 1).tolist()
    xs = lo[0] + (np.arange(nx) + 0.5) * cell
    ys = lo[1] + (np.arange(ny) + 0.5) * cell
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    img = np.zeros(nx * ny, np.uint8)
    for k, r in enumerate(rooms, start=1):
        img[point_in_polygon(pts, r.polygon) & (img == 0)] = min(k * (255 // max(len(rooms), 1)), 255)
    return np.flipud(img.reshape(nx, ny).T)


def cmd_inspect(args) -> int:
    from .graph import load_graph

    try:
        graph = load_graph(args.graph)
    except (KeySGError, OSError, ValueError) as exc:
        return _fail(getattr(exc, "stage", "load"), str(exc))
    if args.keyframes:
        try:
            room = graph.lookup(args.keyframes)
        except KeySGError as exc:
            return _fail(exc.stage, str(exc))
        if getattr(room, "level", None) != "room":
            return _fail("inspect", f"{args.keyframes} is not a room")
        print(json.dumps({
            "room": room.id,
            "keyframes": [k.index for k in room.keyframes],
            "dense_frames": len(room.dense_frames),
            "coverage": room.coverage,
            "flags": room.flags,
        }, sort_keys=True))
        return EXIT_OK
    if args.rooms:
        from PIL import Image

        out = Path(args.rooms)
        out.mkdir(parents=True, exist_ok=True)
        for fl in graph.floors:
            path = out / f"{fl.id}_rooms.png"
            Image.fromarray(_rasterize(fl.rooms)).save(path)
            print(path)
        return EXIT_OK
    summary = {
        "counts": graph.counts(),
        "floors": [
            {"id": f.id, "z": [f.z_min, f.z_max], "rooms": [
                {"id": r.id, "area": round(r.area(), 3), "objects": [o.label for o in r.objects],
                 "keyframes": len(r.keyframes), "coverage": r.coverage}
                for r in f.rooms]}
            for f in graph.floors
        ],
        "metadata": {k: graph.metadata.get(k) for k in ("keysg_version", "config_digest", "provider", "created")},
    }
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaltasks import run_task

    try:
        graph, index = _load(args)
        provider, _ = _provider(args, BuildConfig())
    except (KeySGError, OSError, ValueError) as exc:
        return _fail(getattr(exc, "stage", "load"), str(exc))
    try:
        result, table = run_task(args.task, graph, index, provider, Path(args.gt))
    except SchemaError as exc:
        return _fail(exc.stage, str(exc))
    except KeySGError as exc:
        return _fail(exc.stage, str(exc))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    out.with_suffix(".txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_serve(args) -> int:
    from .server import serve

    cfg = BuildConfig()
    try:
        graph, index = _load(args)
        provider, _ = _provider(args, cfg)
    except (KeySGError, OSError, ValueError) as exc:
        return _fail(getattr(exc, "stage", "load"), str(exc))
    httpd = serve(graph, index, provider, args.host, args.port, cfg.rag)
    print(f"listening on http://{args.host}:{httpd.server_address[1]}/query", flush=True)
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _provider_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mock", action="store_true", help="use the offline mock provider (also KEYSG_MOCK=1)")
    p.add_argument("--providers", default=None, help="providers.toml for the HTTP provider")
    p.add_argument("--cache-dir", default=None, help="provider response cache (also KEYSG_CACHE_DIR)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keysg", description="Build and query hierarchical scene graphs from posed RGB-D sequences.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build a scene graph and index from a posed RGB-D sequence")
    b.add_argument("--input", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--config", default=None, help="TOML config file")
    b.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    b.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    _provider_flags(b)
    b.set_defaults(func=cmd_build)

    q = sub.add_parser("query", help="answer a natural-language object query")
    q.add_argument("--graph", required=True)
    q.add_argument("text")
    q.add_argument("--mode", choices=("parsed", "raw"), default="parsed")
    q.add_argument("--json", action="store_true")
    _provider_flags(q)
    q.set_defaults(func=cmd_query)

    i = sub.add_parser("inspect", help="print graph contents")
    i.add_argument("--graph", required=True)
    i.add_argument("--keyframes", metavar="ROOM_ID", help="keyframes and coverage of one room as JSON")
    i.add_argument("--rooms", metavar="DIR", help="write per-floor room label PNGs to DIR")
    i.set_defaults(func=cmd_inspect)

    e = sub.add_parser("eval", help="run an evaluation protocol against ground truth")
    e.add_argument("--graph", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--task", required=True, choices=("seg", "func", "retrieval", "grounding"))
    e.add_argument("--out", required=True)
    _provider_flags(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("serve", help="serve POST /query over HTTP")
    s.add_argument("--graph", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    _provider_flags(s)
    s.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except KeySGError as exc:
        return _fail(exc.stage, str(exc))
    except Exception as exc:  # noqa: BLE001 - last resort, keeps the exit-code contract
        log.debug("unhandled error", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
