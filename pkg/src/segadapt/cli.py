"""Command-line client for the pipeline service.

Every subcommand marshals its arguments into a request against the HTTP API:
in-process over an ASGI transport by default, or against a remote instance
via --server. Exit codes: 0 ok, 1 usage, 2 config, 3 runtime.
"""

from __future__ import annotations

import argparse
import asyncio
import sys
from pathlib import Path

import httpx

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class CliError(RuntimeError):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class ServiceError(RuntimeError):
    def __init__(self, status: int, detail: str):
        super().__init__(f"service error {status}: {detail}")
        self.status = status
        self.detail = detail


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class Client:
    """Thin request layer; in-process ASGI unless a server URL is given."""

    def __init__(self, server: str | None = None):
        self.server = server

    def request(self, method: str, path: str, payload: dict | None = None) -> dict:
        if self.server:
            with httpx.Client(base_url=self.server, timeout=None) as client:
                resp = client.request(method, path, json=payload)
        else:
            resp = asyncio.run(self._local(method, path, payload))
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            raise ServiceError(resp.status_code, str(detail))
        return resp.json()

    async def _local(self, method, path, payload):
        from .service import create_app
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(transport=transport,
                                     base_url="http://segadapt") as client:
            return await client.request(method, path, json=payload)


def _read_config_text(path: str | None) -> str:
    if path is None:
        return ""
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc}", EXIT_CONFIG) from exc


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise CliError(f"--set expects key=value, got {pair!r}", EXIT_CONFIG)
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _config_payload(args) -> dict:
    return {"config_text": _read_config_text(args.config),
            "overrides": _parse_overrides(args.set)}


def _add_config_args(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> _Parser:
    parser = _Parser(prog="segadapt", description=__doc__)
    parser.add_argument("--server", help="remote service URL (default: run in-process)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate the ShiftShapes benchmark")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--source-count", type=int, default=200)
    p.add_argument("--target-count", type=int, default=200)
    p.add_argument("--val-count", type=int, default=100)

    p = sub.add_parser("pretrain", help="source training with adaptive BN")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="run output directory")

    p = sub.add_parser("adapt", help="self-supervised target adaptation")
    _add_config_args(p)
    p.add_argument("--data", help="dataset root")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--pretrain", help="pretrained checkpoint path")
    p.add_argument("--priors", help="precomputed class-prior sidecar")
    p.add_argument("--list-ablations", action="store_true",
                   help="list the ablation flags and exit")

    p = sub.add_parser("eval", help="per-class IoU / mIoU of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="target_val")
    p.add_argument("--out", help="directory for the IoU CSV")

    p = sub.add_parser("inspect", help="threshold curve and prediction dumps")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="dump fused predictions of this checkpoint")
    p.add_argument("--image", help="PPM image for the prediction dump")

    p = sub.add_parser("sweep", help="zeta x beta grid of adaptation runs")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pretrain", required=True)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def _cmd_gen_data(client, args):
    # Resolution and seed come from the config; counts are command flags.
    cfg = _config_payload(args)
    from .core import ConfigError, parse_config_text
    try:
        run_cfg = parse_config_text(cfg["config_text"]).apply_overrides(cfg["overrides"])
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    payload = {"out_dir": args.out, "count_source": args.source_count,
               "count_target": args.target_count, "count_target_val": args.val_count,
               "height": run_cfg.input_h, "width": run_cfg.input_w, "seed": run_cfg.seed}
    resp = client.request("POST", "/datasets", payload)
    print(f"manifest: {resp['manifest']}")
    print(f"source/target/target_val: {resp['count_source']}/"
          f"{resp['count_target']}/{resp['count_target_val']}")
    return EXIT_OK


def _cmd_pretrain(client, args):
    payload = {**_config_payload(args), "data_root": args.data, "out_dir": args.out}
    resp = client.request("POST", "/runs/pretrain", payload)
    print(f"checkpoint: {resp['checkpoint']}")
    print(f"metrics: {resp['metrics_csv']}")
    if resp["final_source_loss"] is not None:
        print(f"final source loss: {resp['final_source_loss']:.6f}")
    return EXIT_OK


def _cmd_adapt(client, args):
    if args.list_ablations:
        for entry in client.request("GET", "/ablations"):
            print(f"{entry['flag']}: {entry['description']}")
        return EXIT_OK
    missing = [name for name, value in
               (("--data", args.data), ("--out", args.out), ("--pretrain", args.pretrain))
               if not value]
    if missing:
        raise CliError(f"adapt requires {', '.join(missing)}", EXIT_USAGE)
    payload = {**_config_payload(args), "data_root": args.data, "out_dir": args.out,
               "pretrain_checkpoint": args.pretrain, "priors_path": args.priors}
    resp = client.request("POST", "/runs/adapt", payload)
    print(f"checkpoint (segmentation net): {resp['checkpoint_phi']}")
    print(f"checkpoint (momentum net): {resp['checkpoint_psi']}")
    print(f"metrics: {resp['metrics_csv']}")
    print(f"chi/theta history: {resp['history_csv']}")
    if resp["final_miou"] is not None:
        print(f"final target_val mIoU: {resp['final_miou']:.4f}")
    return EXIT_OK


def _cmd_eval(client, args):
    out_csv = str(Path(args.out) / "iou.csv") if args.out else None
    payload = {"checkpoint": args.checkpoint, "data_root": args.data,
               "split": args.split, "out_csv": out_csv}
    resp = client.request("POST", "/eval", payload)
    for name, value in zip(resp["class_names"], resp["iou"]):
        print(f"{name}: {'-' if value is None else f'{value:.4f}'}")
    print(f"miou: {resp['miou']:.4f}")
    if resp["csv_path"]:
        print(f"csv: {resp['csv_path']}")
    return EXIT_OK


def _cmd_inspect(client, args):
    payload = {**_config_payload(args), "out_dir": args.out,
               "checkpoint": args.checkpoint, "image": args.image}
    resp = client.request("POST", "/inspect", payload)
    print(f"threshold curve: {resp['curve_csv']}")
    print(f"theta(chi=0.02)/peak: {resp['theta_at_002']:.9f}")
    for dump in resp["dumps"]:
        print(f"dump: {dump}")
    return EXIT_OK


def _cmd_sweep(client, args):
    payload = {**_config_payload(args), "data_root": args.data, "out_dir": args.out,
               "pretrain_checkpoint": args.pretrain}
    resp = client.request("POST", "/runs/sweep", payload)
    betas = resp["beta_values"]
    print("zeta\\beta," + ",".join(str(b) for b in betas))
    for zeta, row in zip(resp["zeta_values"], resp["miou"]):
        print(f"{zeta}," + ",".join(f"{v:.4f}" for v in row))
    print(f"csv: {resp['csv_path']}")
    return EXIT_OK


def _cmd_serve(args):
    import uvicorn
    from .service import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.command == "serve":
        return _cmd_serve(args)
    client = Client(args.server)
    handlers = {"gen-data": _cmd_gen_data, "pretrain": _cmd_pretrain, "adapt": _cmd_adapt,
                "eval": _cmd_eval, "inspect": _cmd_inspect, "sweep": _cmd_sweep}
    try:
        return handlers[args.command](client, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ServiceError as exc:
        print(f"error: {exc.detail}", file=sys.stderr)
        return EXIT_CONFIG if exc.status in (400, 422) else EXIT_RUNTIME
    except httpx.HTTPError as exc:
        print(f"error: cannot reach service: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
