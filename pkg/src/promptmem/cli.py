"""Command-line client for the service.

Each verb becomes one request.  Without ``--url`` the app is served
in-process; with it the request goes to a running server.  The response is
printed as JSON.  Failures print a JSON error record and exit nonzero.

Config values come from ``--config FILE``, then ``--set key=value`` and
``--key value`` flags that use dotted config names (``--pdm.token.N 16``).
"""

from __future__ import annotations

import argparse
import json
import sys

EXIT_CODES = {"configuration": 2, "data": 3, "parse": 3, "io": 4, "state": 5, "numeric": 6, "empty": 7,
              "request": 8}

VERBS = ("generate-data", "burn-in", "adapt", "eval", "export-features", "probe", "sweep-memory",
         "compare-selection", "plot", "ablate")


class UsageError(Exception):
    pass


def _parse_overrides(sets: list[str], extras: list[str]) -> dict[str, str]:
    out = {}
    for item in sets:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    i = 0
    while i < len(extras):
        tok = extras[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            k, v = key.split("=", 1)
            out[k] = v
            i += 1
            continue
        if i + 1 >= len(extras):
            raise UsageError(f"flag {tok} needs a value")
        out[key] = extras[i + 1]
        i += 2
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptmem", description=__doc__.splitlines()[0])
    parser.add_argument("--url", help="base URL of a running service (default: in-process)")
    sub = parser.add_subparsers(dest="verb", required=True)

    def configured(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        return p

    configured("generate-data", "write the synthetic clean/fog benchmark")
    p = configured("burn-in", "supervised source-only training")
    p.add_argument("--resume")
    p.add_argument("--max-epochs", type=int)
    p = configured("adapt", "mean-teacher adaptation with prompt memory")
    p.add_argument("--burn-in-checkpoint", required=True)
    p.add_argument("--resume")
    p.add_argument("--max-epochs", type=int)

    p = sub.add_parser("eval", help="mAP of a checkpoint on one domain split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root")
    p.add_argument("--domain", default="target")
    p.add_argument("--split", default="val")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--which", choices=("teacher", "student"))

    p = sub.add_parser("export-features", help="dump encoder or matched-query features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data-root")
    p.add_argument("--layer", default="encoder_mean")
    p.add_argument("--split", default="train")
    p.add_argument("--which", choices=("teacher", "student"))

    p = sub.add_parser("probe", help="domain-classifier divergence report for feature dumps")
    p.add_argument("--dump", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--seeds", default="0")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--out")

    p = configured("sweep-memory", "adapt once per memory size")
    p.add_argument("--sizes", default="1,4,10,16")
    p.add_argument("--out")
    p = configured("compare-selection", "adapt once per selection strategy")
    p.add_argument("--strategies", default="random,kmeans,distribution")
    p.add_argument("--out")
    p = configured("ablate", "source-only vs mean-teacher-only vs full pipeline")
    p.add_argument("--out")

    p = sub.add_parser("plot", help="render report or metrics files as PNG charts")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out-dir", default="plots")
    return parser


def _ints(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from exc


def to_request(args: argparse.Namespace, extras: list[str]) -> tuple[str, dict]:
    """Translate parsed arguments into (endpoint path, JSON body)."""
    verb = args.verb
    body: dict = {}
    if hasattr(args, "set"):
        body["config_file"] = args.config
        body["config"] = _parse_overrides(args.set, extras)
    elif extras:
        raise UsageError(f"unrecognized arguments: {' '.join(extras)}")
    if verb in ("burn-in", "adapt"):
        body.update(resume=args.resume, max_epochs=args.max_epochs)
    if verb == "adapt":
        body["burn_in_checkpoint"] = args.burn_in_checkpoint
    elif verb == "eval":
        body.update(checkpoint=args.checkpoint, data_root=args.data_root, domain=args.domain, split=args.split,
                    iou_threshold=args.iou_threshold, which=args.which)
    elif verb == "export-features":
        body.update(checkpoint=args.checkpoint, out=args.out, data_root=args.data_root, layer=args.layer,
                    split=args.split, which=args.which)
    elif verb == "probe":
        dumps = {}
        for item in args.dump:
            if "=" not in item:
                raise UsageError(f"--dump expects NAME=PATH, got {item!r}")
            name, path = item.split("=", 1)
            dumps[name] = path
        body.update(dumps=dumps, seeds=_ints(args.seeds), epochs=args.epochs, out=args.out)
    elif verb == "sweep-memory":
        body.update(sizes=_ints(args.sizes), out=args.out)
    elif verb == "compare-selection":
        body.update(strategies=[s.strip() for s in args.strategies.split(",") if s.strip()], out=args.out)
    elif verb == "ablate":
        body["out"] = args.out
    elif verb == "plot":
        body.update(inputs=args.inputs, out_dir=args.out_dir)
    return "/" + verb, body


def _client(url: str | None):
    if url:
        import httpx

        return httpx.Client(base_url=url, timeout=None)
    from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app, raise_server_exceptions=False)


def _error_code(status: int, payload) -> tuple[int, dict]:
    if isinstance(payload, dict) and "error" in payload:
        return EXIT_CODES.get(payload["error"], 1), payload
    if status == 422:  # request validation
        return EXIT_CODES["configuration"], {"error": "configuration", "message": json.dumps(payload)}
    return 1, {"error": "internal", "message": str(payload)}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        path, body = to_request(args, extras)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}))
        return EXIT_CODES["configuration"]
    try:
        with _client(args.url) as client:
            resp = client.post(path, json=body)
    except Exception as exc:  # connection failures and the like
        print(json.dumps({"error": "request", "message": str(exc)}))
        return EXIT_CODES["request"]
    try:
        payload = resp.json()
    except ValueError:
        payload = resp.text
    if resp.status_code >= 400:
        code, record = _error_code(resp.status_code, payload)
        print(json.dumps(record, sort_keys=True))
        return code
    print(json.dumps(payload, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
