"""Thin command-line client for the pipeline service.

Subcommand flags are generated from the pydantic request models, so the
CLI, the config files, and the HTTP API share one schema. By default a
command dispatches in-process to the same handlers the service uses;
pass --server URL to POST the request to a running instance instead
(paths then refer to the server's filesystem).

Config files are key=value lines (# comments allowed); explicit CLI
flags take precedence. Exit codes: 0 success, 1 usage/config error,
2 runtime error (infeasible smoothing, corrupt file, failed run).
"""

from __future__ import annotations

import argparse
import json
import sys
import typing

from pydantic import ValidationError

from . import runs
from . import schemas as S
from .errors import ConfigError, CtiqError
from .runtime import tune_allocator

COMMANDS = {
    "gen-data": (S.GenDataRequest, runs.gen_data, "/api/gen-data"),
    "train-metric": (S.TrainMetricRequest, runs.run_train_metric, "/api/train-metric"),
    "train-denoiser": (S.TrainDenoiserRequest, runs.run_train_denoiser, "/api/train-denoiser"),
    "certify": (S.CertifyRequest, runs.run_certify, "/api/certify"),
    "attack": (S.AttackRequest, runs.run_attack, "/api/attack"),
    "eval-compare": (S.EvalCompareRequest, runs.run_eval_compare, "/api/eval-compare"),
    "optimize": (S.OptimizeRequest, runs.run_optimize, "/api/optimize"),
    "sweep": (S.SweepRequest, runs.run_sweep, "/api/sweep"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are exit code 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit(self._fail(message))

    @staticmethod
    def _fail(message):
        print(f"error: {message}", file=sys.stderr)
        return 1


def _unwrap_optional(annotation):
    if typing.get_origin(annotation) in (typing.Union, getattr(__import__("types"), "UnionType", ())):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return annotation


def _add_model_flags(parser, model_cls):
    for name, field in model_cls.model_fields.items():
        ann = _unwrap_optional(field.annotation)
        flag = "--" + name.replace("_", "-")
        origin = typing.get_origin(ann)
        if ann is bool:
            parser.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction,
                                default=argparse.SUPPRESS)
        elif origin is list:
            parser.add_argument(flag, dest=name, type=str, default=argparse.SUPPRESS,
                                help="comma-separated list")
        elif ann in (int, float, str):
            parser.add_argument(flag, dest=name, type=ann, default=argparse.SUPPRESS)
        else:
            parser.add_argument(flag, dest=name, type=str, default=argparse.SUPPRESS)


def _coerce_lists(model_cls, values: dict) -> dict:
    out = dict(values)
    for name, field in model_cls.model_fields.items():
        ann = _unwrap_optional(field.annotation)
        if typing.get_origin(ann) is list and isinstance(out.get(name), str):
            out[name] = [part.strip() for part in out[name].split(",") if part.strip()]
    return out


def parse_config_file(path) -> dict:
    values = {}
    try:
        text = open(path, "r", encoding="utf-8").read()
    except OSError as exc:
        raise ConfigError(f"field 'config': cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"field 'config': line {lineno} is not key=value: '{line}'")
        key, _, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        raw = raw.strip()
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    return values


def build_request(model_cls, cli_values: dict, config_path):
    merged = {}
    if config_path:
        merged.update(parse_config_file(config_path))
    merged.update(cli_values)  # CLI flags win over the config file
    return model_cls(**_coerce_lists(model_cls, merged))


def _post_remote(server: str, route: str, req) -> int:
    import httpx

    url = server.rstrip("/") + route
    resp = httpx.post(url, json=json.loads(req.model_dump_json()), timeout=None)
    print(resp.text)
    if resp.is_success:
        return 0
    return 1 if resp.status_code in (400, 422) else 2


def main(argv=None) -> int:
    parser = _Parser(prog="ctiq", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--server", default=None,
                        help="URL of a running ctiq service; default runs in-process")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (model_cls, _, _) in COMMANDS.items():
        p = sub.add_parser(name, prog=f"ctiq {name}")
        p.add_argument("--config", default=None, help="key=value config file")
        _add_model_flags(p, model_cls)
    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8321)

    args = parser.parse_args(argv)
    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    model_cls, handler, route = COMMANDS[args.command]
    cli_values = {k: v for k, v in vars(args).items()
                  if k not in ("command", "server", "config") and v is not None}
    try:
        req = build_request(model_cls, cli_values, args.config)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.server:
        try:
            return _post_remote(args.server, route, req)
        except Exception as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    tune_allocator()
    try:
        resp = handler(req)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CtiqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(resp.model_dump_json(indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
