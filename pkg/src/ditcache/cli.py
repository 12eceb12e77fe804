"""Command-line client for the experiment pipeline.

Subcommands: profile, run, ablate, l1curve, compare. By default commands
execute in-process against the same pipeline functions the HTTP service
exposes; with --server URL they become a thin HTTP client and the artifact
files are written locally from the response payload either way.

Exit codes: 0 success, 2 configuration error, 3 runtime contract violation
(stale cache and friends), 4 I/O error.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
import urllib.error
import urllib.request

from . import pipeline
from .config import ExperimentConfig, load_config
from .errors import ConfigError, ContractViolation

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONTRACT = 3
EXIT_IO = 4


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.model.seed = args.seed
    return cfg


def _read_text(path) -> str:
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


# ---------------------------------------------------------------------------
# Remote execution
# ---------------------------------------------------------------------------


def _post(server: str, endpoint: str, payload: dict) -> dict:
    url = server.rstrip("/") + endpoint
    data = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(url, data=data, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        body = exc.read().decode("utf-8", errors="replace")
        try:
            detail = json.loads(body)
        except json.JSONDecodeError:
            detail = {"error_kind": "internal", "detail": body}
        kind = detail.get("error_kind", "internal")
        if kind == "config" or exc.code == 400:
            raise ConfigError(detail.get("detail", body))
        raise ContractViolation(detail.get("detail", body))


def _artifacts_from_response(response: dict) -> dict[str, bytes]:
    artifacts: dict[str, bytes] = {}
    for item in response["artifacts"]:
        if item["encoding"] == "base64":
            artifacts[item["path"]] = base64.b64decode(item["content"])
        else:
            artifacts[item["path"]] = item["content"].encode("utf-8")
    return artifacts


def _remote_payload(args) -> dict:
    payload = {"config_text": _read_text(args.config) if args.config else ""}
    if args.seed is not None:
        payload["seed"] = args.seed
    return payload


# ---------------------------------------------------------------------------
# Command dispatch
# ---------------------------------------------------------------------------


def _run_command(args) -> dict[str, bytes]:
    command = args.command
    if command == "compare":
        if args.server:
            payload = {
                "reference_pdit": base64.b64encode(_read_bytes(args.ref)).decode("ascii"),
                "test_pdit": base64.b64encode(_read_bytes(args.test)).decode("ascii"),
                "peak": args.peak,
            }
            return _artifacts_from_response(_post(args.server, "/v1/compare", payload))
        result = pipeline.cmd_compare(_read_bytes(args.ref), _read_bytes(args.test), peak=args.peak)
        return result.artifacts

    if args.server:
        payload = _remote_payload(args)
        if command == "run":
            if args.partition:
                payload["partition_text"] = _read_text(args.partition)
            payload["frames"] = args.frames
            payload["trace"] = args.trace
            payload["timings"] = args.timings
        if command == "ablate":
            payload["timings"] = args.timings
        return _artifacts_from_response(_post(args.server, f"/v1/{command}", payload))

    cfg = _load_config(args)
    if command == "profile":
        return pipeline.cmd_profile(cfg).artifacts
    if command == "run":
        partition_text = _read_text(args.partition) if args.partition else None
        result = pipeline.cmd_run(
            cfg,
            partition_text=partition_text,
            frames=args.frames,
            trace=args.trace,
            timings=args.timings,
        )
        return result.artifacts
    if command == "ablate":
        return pipeline.cmd_ablate(cfg, timings=args.timings).artifacts
    if command == "l1curve":
        return pipeline.cmd_l1curve(cfg).artifacts
    raise ConfigError(f"unknown command {command!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ditcache", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file (key = value lines)")
        p.add_argument("--out", default=".", help="output directory for artifact files")
        p.add_argument("--seed", type=int, default=None, help="override model.seed")
        p.add_argument("--server", default=None, help="run against a ditcache HTTP service")

    p = sub.add_parser("profile", help="trace an uncached run and emit heatmap + partition")
    common(p)

    p = sub.add_parser("run", help="reference vs cached run, emit the comparison report")
    common(p)
    p.add_argument("--partition", help="partition file from a previous profile")
    p.add_argument("--frames", action="store_true", help="dump per-step PGM frames")
    p.add_argument("--trace", action="store_true", help="dump the cache state as JSON")
    p.add_argument("--timings", action="store_true", help="include nondeterministic wall-clock fields")

    p = sub.add_parser("ablate", help="pattern x schedule grid against one shared reference")
    common(p)
    p.add_argument("--timings", action="store_true", help="include nondeterministic wall-clock fields")

    p = sub.add_parser("l1curve", help="per-step L1 distance of an uncached run")
    common(p)

    p = sub.add_parser("compare", help="metrics between two PDIT latent dumps")
    common(p)
    p.add_argument("--ref", required=True, help="reference latent (.pdit)")
    p.add_argument("--test", required=True, help="test latent (.pdit)")
    p.add_argument("--peak", type=float, default=None, help="PSNR/SSIM peak (default: reference spread)")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        artifacts = _run_command(args)
        written = pipeline.write_artifacts(args.out, artifacts)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractViolation, ValueError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
