import argparse
import logging
import os
import sys
from contextlib import asynccontextmanager
from typing import List, Optional

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from database import init_db
from app.routers import experiments_router, gkls_router
from app.services.experiment_runner import (
    LIBRARY_VERSION,
    ConfigValidationError,
    config_hash,
    export_config,
    load_config,
    run,
    run_batch,
)

logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_TOLERANCE = 1
EXIT_INVALID = 2


@asynccontextmanager
async def lifespan(app: FastAPI):
    init_db()
    yield


app = FastAPI(title="Collider API", version=LIBRARY_VERSION, lifespan=lifespan)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(experiments_router)
app.include_router(gkls_router)

@app.get("/")
def root():
    return {"message": "Collider API", "version": LIBRARY_VERSION}


def _report_invalid(path: str, error: ConfigValidationError):
    print(f"{path}: invalid config", file=sys.stderr)
    for item in error.errors:
        print(f"  - {item}", file=sys.stderr)


def _cmd_validate(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigValidationError as e:
        _report_invalid(args.config, e)
        return EXIT_INVALID
    print(f"{args.config}: ok ({config.kind.value}, config hash {config_hash(config)})")
    return EXIT_PASS


def _cmd_run(args) -> int:
    try:
        config = load_config(args.config, seed=args.seed)
        bundle = run(config, out_dir=args.out, tol_scale=args.tol_scale, record=args.record)
    except ConfigValidationError as e:
        _report_invalid(args.config, e)
        return EXIT_INVALID
    for verdict in bundle.verdicts:
        status = "pass" if verdict.passed else "FAIL"
        print(f"  [{status}] {verdict.name}: {verdict.value:.3e} (tolerance {verdict.tolerance:.3e})")
    for warning in bundle.warnings:
        print(f"  warning: {warning}")
    print(f"{bundle.name}: {'pass' if bundle.passed else 'fail'} -> {bundle.output_dir}")
    return EXIT_PASS if bundle.passed else EXIT_TOLERANCE


def _cmd_export(args) -> int:
    try:
        config = load_config(args.config, seed=args.seed)
        document = export_config(config, args.dt)
    except ConfigValidationError as e:
        _report_invalid(args.config, e)
        return EXIT_INVALID
    text = document.model_dump_json(indent=2)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as handle:
            handle.write(text + "\n")
        logger.info(f"Wrote schedule export to {args.out}")
    else:
        print(text)
    return EXIT_PASS


def _cmd_batch(args) -> int:
    configs = []
    invalid = False
    for path in args.configs:
        try:
            configs.append(load_config(path, seed=args.seed))
        except ConfigValidationError as e:
            _report_invalid(path, e)
            invalid = True
    if invalid:
        return EXIT_INVALID
    try:
        bundles = run_batch(configs, args.out, args.tol_scale, args.workers, args.record)
    except ConfigValidationError as e:
        _report_invalid("batch", e)
        return EXIT_INVALID
    for bundle in bundles:
        print(f"{bundle.name}: {'pass' if bundle.passed else 'fail'} -> {bundle.output_dir}")
    return max((b.exit_code for b in bundles), default=EXIT_PASS)


def _cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collider", description="Collision-model experiments for open quantum systems")
    parser.add_argument("--log-level", default=os.environ.get("COLLIDER_LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config without running it")
    p.add_argument("config")
    p.set_defaults(handler=_cmd_validate)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tol-scale", dest="tol_scale", type=float, default=1.0)
    p.add_argument("--record", action="store_true", help="add the run to the run ledger")
    p.set_defaults(handler=_cmd_run)

    p = sub.add_parser("export", help="export one timestep as a gate list")
    p.add_argument("config")
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_export)

    p = sub.add_parser("batch", help="run several configs concurrently")
    p.add_argument("configs", nargs="+")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tol-scale", dest="tol_scale", type=float, default=1.0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--record", action="store_true")
    p.set_defaults(handler=_cmd_batch)

    p = sub.add_parser("serve", help="start the HTTP API")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(handler=_cmd_serve)
    return parser


def cli(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    code = args.handler(args)
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    cli()
