"""Command-line interface.

Every subcommand builds the same request model the HTTP service
accepts.  By default the matching handler runs in-process; with
``--server URL`` the request is POSTed to a running service instead,
so scripts behave identically either way.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import RefSegError


def _post(server: str, path: str, payload: dict) -> dict:
    import httpx
    url = server.rstrip("/") + path
    resp = httpx.post(url, json=payload, timeout=None)
    if resp.status_code != 200:
        raise SystemExit(f"server returned {resp.status_code}: {resp.text}")
    return resp.json()


def _emit(data: dict) -> None:
    json.dump(data, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _cmd_gen_corpus(args) -> int:
    from .service import handlers, schemas
    if args.spec:
        from .config import load_scene_spec
        spec_model = schemas.SceneSpecModel.from_spec(load_scene_spec(args.spec))
    else:
        spec_model = schemas.SceneSpecModel()
    req = schemas.CorpusRequest(out_dir=args.out, count=args.count,
                                seed=args.seed, spec=spec_model)
    if args.server:
        _emit(_post(args.server, "/corpus", req.model_dump()))
    else:
        _emit(handlers.gen_corpus(req).model_dump())
    return 0


def _cmd_train(args) -> int:
    from .config import load_train_config
    from .service import handlers, schemas
    cfg_model = schemas.TrainConfigModel.from_config(load_train_config(args.config))
    req = schemas.TrainRequest(config=cfg_model)
    if args.server:
        _emit(_post(args.server, "/train", req.model_dump()))
    else:
        _emit(handlers.run_train(req).model_dump())
    return 0


def _cmd_eval(args) -> int:
    from .service import handlers, schemas
    req = schemas.EvalRequest(checkpoint=args.checkpoint, corpus=args.corpus,
                              report=args.report)
    if args.server:
        _emit(_post(args.server, "/eval", req.model_dump()))
    else:
        _emit(handlers.run_eval(req).model_dump())
    return 0


def _cmd_gradcheck(args) -> int:
    from .service import handlers, schemas
    req = schemas.GradcheckRequest(modules=args.module or None,
                                   seed=args.seed, tolerance=args.tolerance)
    if args.server:
        data = _post(args.server, "/gradcheck", req.model_dump())
    else:
        data = handlers.run_gradcheck(req).model_dump()
    for result in data["results"]:
        flag = "ok" if result["passed"] else "FAIL"
        print(f"{result['name']}: max rel err {result['max_rel_err']:.3e} "
              f"[{flag}]")
    return 0 if data["all_passed"] else 1


def _cmd_predict(args) -> int:
    from .service import handlers, schemas
    from .sparse import load_point_cloud
    points = load_point_cloud(args.points)
    req = schemas.PredictRequest(checkpoint=args.checkpoint,
                                 points=points.tolist(), query=args.query)
    if args.server:
        _emit(_post(args.server, "/predict", req.model_dump()))
    else:
        _emit(handlers.run_predict(req).model_dump())
    return 0


def _cmd_serve(args) -> int:
    import uvicorn
    from .service import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refseg3d",
        description="Language-referred 3D segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_server(p):
        p.add_argument("--server", default="",
                       help="POST to this service URL instead of running "
                            "in-process")
        return p

    p = with_server(sub.add_parser("gen-corpus",
                                   help="generate a synthetic corpus"))
    p.add_argument("--spec", default="", help="scene spec key=value file")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--count", type=int, required=True,
                   help="number of scenes")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gen_corpus)

    p = with_server(sub.add_parser("train", help="run a training job"))
    p.add_argument("--config", required=True, help="key=value config file")
    p.set_defaults(fn=_cmd_train)

    p = with_server(sub.add_parser("eval",
                                   help="score a checkpoint on a corpus"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--report", default="", help="write a JSON report here")
    p.set_defaults(fn=_cmd_eval)

    p = with_server(sub.add_parser("gradcheck",
                                   help="finite-difference gradient checks"))
    p.add_argument("--module", action="append",
                   help="suite name (repeatable); default: all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)

    p = with_server(sub.add_parser("predict",
                                   help="segment a point cloud file"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--points", required=True, help="point cloud file")
    p.add_argument("--query", required=True)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=_cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except RefSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
