"""Command-line client for the simulation service.

The CLI is a thin HTTP client: by default it mounts the service
in-process over an ASGI transport (no daemon needed); with --server it
targets a running instance instead. Output CSV goes to --out, resolved
against $SAMPLECAST_OUT_DIR when the path is relative.
"""

from __future__ import annotations

import argparse
import asyncio
import os
import sys
from pathlib import Path

import httpx
import yaml

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID = 2


def _read_config(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        print("error: cannot read config %s: %s" % (path, exc), file=sys.stderr)
        raise SystemExit(EXIT_ERROR)


def _out_path(out: str) -> Path:
    path = Path(out)
    if not path.is_absolute():
        base = os.environ.get("SAMPLECAST_OUT_DIR")
        if base:
            path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _parse_grid(items: list[str]) -> dict:
    grid: dict[str, list] = {}
    for item in items:
        if "=" not in item:
            raise SystemExit("error: --grid expects KEY=V1,V2,... (got %r)" % item)
        key, _, values = item.partition("=")
        grid[key] = [yaml.safe_load(v) for v in values.split(",") if v != ""]
        if not grid[key]:
            raise SystemExit("error: --grid %s has no values" % key)
    return grid


async def _request(server: str | None, method: str, path: str, payload: dict) -> httpx.Response:
    if server:
        async with httpx.AsyncClient(base_url=server, timeout=None) as client:
            return await client.request(method, path, json=payload)
    from .service import create_app

    transport = httpx.ASGITransport(app=create_app())
    async with httpx.AsyncClient(
        transport=transport, base_url="http://samplecast", timeout=None
    ) as client:
        return await client.request(method, path, json=payload)


def _call(server: str | None, method: str, path: str, payload: dict) -> httpx.Response:
    try:
        return asyncio.run(_request(server, method, path, payload))
    except httpx.HTTPError as exc:
        print("error: request failed: %s" % exc, file=sys.stderr)
        raise SystemExit(EXIT_ERROR)


def cmd_validate(args) -> int:
    config = _read_config(args.config)
    resp = _call(args.server, "POST", "/validate", {"config": config})
    body = resp.json()
    if body.get("valid"):
        print("ok: %s" % args.config)
        return EXIT_OK
    for err in body.get("errors", []):
        print("invalid: %s" % err, file=sys.stderr)
    return EXIT_INVALID


def cmd_run(args) -> int:
    config = _read_config(args.config)
    payload = {"config": config, "seed": args.seed}
    resp = _call(args.server, "POST", "/run", payload)
    if resp.status_code != 200:
        print("error: %s" % resp.json().get("detail", resp.text), file=sys.stderr)
        return EXIT_INVALID
    body = resp.json()
    out = _out_path(args.out)
    out.write_text(body["csv"], encoding="utf-8")
    print("wrote %s (%d rows, seed %d)" % (out, len(body["rows"]), body["seed"]))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _read_config(args.config)
    grid = _parse_grid(args.grid or [])
    seeds = list(range(args.seeds))
    payload = {"config": config, "grid": grid, "seeds": seeds, "jobs": args.jobs}
    resp = _call(args.server, "POST", "/sweep", payload)
    if resp.status_code != 200:
        print("error: %s" % resp.json().get("detail", resp.text), file=sys.stderr)
        return EXIT_INVALID
    body = resp.json()
    out = _out_path(args.out)
    out.write_text(body["csv"], encoding="utf-8")
    print("wrote %s (%d result rows)" % (out, body["runs"]))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="samplecast",
        description="Reliable fragmented-sample transport simulator",
    )
    parser.add_argument(
        "--server",
        default=None,
        help="URL of a running service; default runs the service in-process",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_val = sub.add_parser("validate", help="check a scenario config")
    p_val.add_argument("config")
    p_val.set_defaults(fn=cmd_validate)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", required=True, help="output CSV path")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter sweep")
    p_sweep.add_argument("config")
    p_sweep.add_argument(
        "--grid",
        action="append",
        metavar="KEY=V1,V2,...",
        help="dotted config key and comma-separated values; repeatable",
    )
    p_sweep.add_argument("--seeds", type=int, required=True, help="seed count (0..N-1)")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--out", required=True, help="output CSV path")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_serve = sub.add_parser("serve", help="expose the service over HTTP")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
