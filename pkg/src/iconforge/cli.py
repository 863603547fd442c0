"""Operator command surface; a thin client of the service layer.

Every subcommand builds the same request model the HTTP API accepts and
either executes it in-process (default) or posts it to a running service
(``--server URL``). Results print as one JSON line on stdout; failures
print ``{"error": kind, "message": ...}`` on stderr.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import sys

from pydantic import ValidationError

from . import service
from .errors import Divergence, IconforgeError, NonFiniteGradient
from .schemas import (
    EvaluateRequest,
    FinetuneRequest,
    PreprocessRequest,
    RegisterRequest,
    TrainRequest,
    WarpRequest,
)

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DIVERGENCE = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def build_parser() -> _Parser:
    p = _Parser(prog="iconforge", description="Deformable 3D registration engine")
    p.add_argument("--server", help="base URL of a running service; "
                                    "commands execute there instead of in-process")
    sub = p.add_subparsers(dest="command", required=True)

    reg = sub.add_parser("register", help="register a moving image onto a fixed image")
    reg.add_argument("--fixed", required=True)
    reg.add_argument("--moving", required=True)
    reg.add_argument("--out-map", required=True)
    reg.add_argument("--out-warped")
    reg.add_argument("--checkpoint")
    reg.add_argument("--io", type=int, default=0, metavar="N",
                     help="instance-optimization iterations (0 = none)")
    reg.add_argument("--io-lr", type=float, default=1e-5)
    reg.add_argument("--modality-fixed", choices=["ct", "mri", "none"], default="none")
    reg.add_argument("--modality-moving", choices=["ct", "mri", "none"], default="none")
    reg.add_argument("--canonical-side", type=int)
    reg.add_argument("--landmarks-fixed")
    reg.add_argument("--landmarks-moving")
    reg.add_argument("--labels-fixed")
    reg.add_argument("--labels-moving")
    reg.add_argument("--snapshot", help="prefix for mid-axial PGM slices")
    reg.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("evaluate", help="metrics of a saved transform")
    ev.add_argument("--map", required=True)
    ev.add_argument("--fixed", required=True)
    ev.add_argument("--moving", required=True)
    ev.add_argument("--landmarks-fixed")
    ev.add_argument("--landmarks-moving")
    ev.add_argument("--labels-fixed")
    ev.add_argument("--labels-moving")
    ev.add_argument("--out", help="write the report JSON here as well")

    tr = sub.add_parser("train", help="train from a dataset manifest")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--out-dir", required=True)
    tr.add_argument("--pairs-per-dataset", type=int)
    tr.add_argument("--epochs-phase1", type=int)
    tr.add_argument("--epochs-phase2", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--canonical-side", type=int)

    ft = sub.add_parser("finetune", help="continue training from a checkpoint")
    ft.add_argument("--checkpoint", required=True)
    ft.add_argument("--manifest", required=True)
    ft.add_argument("--epochs", type=int, required=True)
    ft.add_argument("--out-dir", required=True)
    ft.add_argument("--pairs-per-dataset", type=int)
    ft.add_argument("--seed", type=int)

    pp = sub.add_parser("preprocess", help="normalize intensities and resize")
    pp.add_argument("--in", dest="input", required=True)
    pp.add_argument("--out", dest="output", required=True)
    pp.add_argument("--modality", choices=["ct", "mri", "none"], required=True)
    pp.add_argument("--canonical-side", type=int, default=175)

    wp = sub.add_parser("warp", help="apply a saved transform to a volume")
    wp.add_argument("--in", dest="input", required=True)
    wp.add_argument("--map", required=True)
    wp.add_argument("--out", dest="output", required=True)
    wp.add_argument("--labels", action="store_true",
                    help="treat the input as labels (nearest-neighbor warp)")

    return p


def _build_request(args):
    if args.command == "register":
        return "/register", RegisterRequest(
            fixed=args.fixed, moving=args.moving, out_map=args.out_map,
            out_warped=args.out_warped, checkpoint=args.checkpoint,
            io_iterations=args.io, io_lr=args.io_lr,
            modality_fixed=args.modality_fixed, modality_moving=args.modality_moving,
            canonical_side=args.canonical_side,
            landmarks_fixed=args.landmarks_fixed, landmarks_moving=args.landmarks_moving,
            labels_fixed=args.labels_fixed, labels_moving=args.labels_moving,
            snapshot=args.snapshot, seed=args.seed,
        ), service.run_register
    if args.command == "evaluate":
        return "/evaluate", EvaluateRequest(
            map=args.map, fixed=args.fixed, moving=args.moving,
            landmarks_fixed=args.landmarks_fixed, landmarks_moving=args.landmarks_moving,
            labels_fixed=args.labels_fixed, labels_moving=args.labels_moving,
            out=args.out,
        ), service.run_evaluate
    if args.command == "train":
        return "/train", TrainRequest(
            manifest=args.manifest, out_dir=args.out_dir,
            pairs_per_dataset=args.pairs_per_dataset,
            epochs_phase1=args.epochs_phase1, epochs_phase2=args.epochs_phase2,
            seed=args.seed, canonical_side=args.canonical_side, wait=True,
        ), service.run_train
    if args.command == "finetune":
        return "/finetune", FinetuneRequest(
            checkpoint=args.checkpoint, manifest=args.manifest, epochs=args.epochs,
            out_dir=args.out_dir, pairs_per_dataset=args.pairs_per_dataset,
            seed=args.seed, wait=True,
        ), service.run_finetune
    if args.command == "preprocess":
        return "/preprocess", PreprocessRequest(
            input=args.input, output=args.output, modality=args.modality,
            canonical_side=args.canonical_side,
        ), service.run_preprocess
    if args.command == "warp":
        return "/warp", WarpRequest(
            input=args.input, map=args.map, output=args.output, labels=args.labels,
        ), service.run_warp
    raise UsageError(f"unknown command {args.command!r}")


def _execute_remote(server: str, endpoint: str, request) -> dict:
    import httpx

    url = server.rstrip("/") + endpoint
    resp = httpx.post(url, json=request.model_dump(), timeout=None)
    body = resp.json()
    if resp.status_code >= 400:
        raise _remote_error(body)
    return body


def _remote_error(body: dict) -> IconforgeError:
    err = IconforgeError(body.get("message", "remote error"))
    err.kind = body.get("error", "remote")
    return err


def _print_result(command: str, payload: dict) -> None:
    if command in ("register", "evaluate"):
        sys.stdout.write(json.dumps(payload.get("report", payload), sort_keys=True) + "\n")
    else:
        sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        endpoint, request, runner = _build_request(args)
    except (UsageError, ValidationError) as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    try:
        if args.server:
            payload = _execute_remote(args.server, endpoint, request)
        else:
            payload = runner(request).model_dump()
    except (Divergence, NonFiniteGradient) as exc:
        _emit_error(exc.kind, str(exc))
        return EXIT_DIVERGENCE
    except IconforgeError as exc:
        if exc.kind == "divergence":
            _emit_error(exc.kind, str(exc))
            return EXIT_DIVERGENCE
        _emit_error(exc.kind, str(exc))
        return EXIT_IO
    except OSError as exc:
        _emit_error("io", str(exc))
        return EXIT_IO
    _print_result(args.command, payload)
    return 0


if __name__ == "__main__":
    sys.exit(main())
