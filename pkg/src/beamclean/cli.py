"""Thin command-line client for the HTTP service.

Every subcommand builds a request model, sends it through the service (an
in-process app instance by default, or a remote server via --url), and prints
the JSON response. Exit codes: 0 success, 1 usage error, 2 data error,
3 sweep finished with failed cells.
"""

from __future__ import annotations

import argparse
import json
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PARTIAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def _client(url: str | None):
    if url:
        import httpx

        return httpx.Client(base_url=url, timeout=None)
    # in-process: mount the service app directly so no server is needed
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # starlette's httpx2 deprecation on import
        from fastapi.testclient import TestClient

    from .service.app import app

    return TestClient(app, raise_server_exceptions=False)


def _call(args, path: str, payload: dict) -> int:
    with _client(args.url) as client:
        resp = client.post(path, json=payload)
    try:
        body = resp.json()
    except ValueError:
        print(resp.text, file=sys.stderr)
        return EXIT_DATA
    if resp.status_code >= 400:
        detail = body.get("detail")
        if isinstance(detail, dict):
            print(f"error: {detail.get('message')}", file=sys.stderr)
            return EXIT_USAGE if detail.get("kind") == "usage" else EXIT_DATA
        print(f"error: {detail}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(body, indent=1))
    if path == "/api/sweep" and body.get("failed_cells", 0) > 0:
        return EXIT_PARTIAL
    return EXIT_OK


def _prior_payload(spec: str, timeout: float) -> dict:
    if spec == "uniform":
        return {"kind": "uniform"}
    if spec.startswith(("tcp:", "cmd:")):
        return {"kind": "external", "endpoint": spec, "timeout": timeout}
    return {"kind": "ngram", "path": spec}


def build_parser() -> _Parser:
    parser = _Parser(prog="beamclean", description=__doc__)
    parser.add_argument("--url", help="remote service URL (default: run in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-table", help="generate a synthetic embedding table")
    p.add_argument("--v", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gap", type=float, default=0.0, help="min pairwise l2 distance")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-prior", help="train an n-gram prior from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--table", help="table whose vocab size bounds token ids")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("calibrate", help="convert between epsilon and noise scale")
    p.add_argument("--family", choices=["gaussian", "laplace"], required=True)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--scale", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--sensitivity", type=float)
    p.add_argument("--table", help="compute sensitivity from this table")
    p.add_argument(
        "--report-only",
        action="store_true",
        help="epsilon->scale without the closed form's 0<epsilon<1 restriction",
    )

    p = sub.add_parser("obfuscate", help="add calibrated noise to a tokenized corpus")
    p.add_argument("--table", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--family", choices=["gaussian", "laplace"], required=True)
    p.add_argument("--scale", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("attack", help="invert obfuscated embeddings back to tokens")
    p.add_argument("--table", required=True)
    p.add_argument("--in", dest="obfuscated", required=True, help="OBF1 input file")
    p.add_argument("--method", choices=["nn", "beamclean"], default="beamclean")
    p.add_argument(
        "--prior",
        default="uniform",
        help="'uniform', a trained prior path, or tcp:HOST:PORT / cmd:COMMAND",
    )
    p.add_argument("--prior-timeout", type=float, default=30.0)
    p.add_argument("--beam", type=int, default=20)
    p.add_argument("--pool", type=int, help="candidate pool size (default: full vocab)")
    p.add_argument("--lambda", dest="prior_weight", type=float, default=1.0)
    p.add_argument("--family", choices=["gaussian", "laplace"], default="gaussian")
    p.add_argument(
        "--estimation", choices=["fixed", "closed_form", "gradient"], default="closed_form"
    )
    p.add_argument("--mode", choices=["isotropic", "diagonal"], default="isotropic")
    p.add_argument("--norm", choices=["l1", "l2"], default="l2", help="nn distance norm")
    p.add_argument("--token-map", help="prior-side table for cross-vocabulary decoding")
    p.add_argument("--no-restrict", action="store_true", help="keep unmapped candidates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write attack results JSON here")

    p = sub.add_parser("evaluate", help="score decoded sequences against the truth")
    p.add_argument("--truth", required=True, help="corpus JSONL with true token ids")
    p.add_argument("--results", required=True, help="attack results JSON")

    p = sub.add_parser("sweep", help="run a full epsilon sweep from a config file")
    p.add_argument("--config", required=True)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    p = sub.add_parser("serve-prior", help="serve a prior over the wire protocol")
    p.add_argument("--prior", required=True, help="trained prior path, or 'uniform:V'")
    p.add_argument("--name", default="prior")
    p.add_argument("--tcp", help="HOST:PORT to listen on (default: stdio)")

    return parser


def _cmd_serve(args) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def _cmd_serve_prior(args) -> int:
    from .external import serve_prior, serve_prior_tcp
    from .priors import UniformPrior, load_prior

    if args.prior.startswith("uniform:"):
        prior = UniformPrior(int(args.prior.split(":", 1)[1]))
    else:
        prior = load_prior(args.prior)
    if args.tcp:
        host, port = args.tcp.rsplit(":", 1)
        server = serve_prior_tcp(prior, host, int(port), name=args.name)
        server.serve_forever()
    else:
        serve_prior(prior, name=args.name)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        return _cmd_serve(args)
    if args.command == "serve-prior":
        return _cmd_serve_prior(args)

    if args.command == "gen-table":
        payload = {
            "v": args.v,
            "d": args.d,
            "seed": args.seed,
            "min_pairwise_gap": args.gap,
            "out": args.out,
        }
        return _call(args, "/api/tables/generate", payload)

    if args.command == "train-prior":
        payload = {
            "corpus": args.corpus,
            "order": args.order,
            "alpha": args.alpha,
            "table": args.table,
            "vocab_size": args.vocab_size,
            "max_len": args.max_len,
            "out": args.out,
        }
        return _call(args, "/api/priors/train", payload)

    if args.command == "calibrate":
        payload = {
            "family": args.family,
            "epsilon": args.epsilon,
            "scale": args.scale,
            "delta": args.delta,
            "sensitivity": args.sensitivity,
            "table": args.table,
            "strict": not args.report_only,
        }
        return _call(args, "/api/calibrate", payload)

    if args.command == "obfuscate":
        payload = {
            "table": args.table,
            "corpus": args.corpus,
            "family": args.family,
            "scale": args.scale,
            "epsilon": args.epsilon,
            "delta": args.delta,
            "seed": args.seed,
            "max_len": args.max_len,
            "out": args.out,
        }
        return _call(args, "/api/obfuscate", payload)

    if args.command == "attack":
        payload = {
            "table": args.table,
            "obfuscated": args.obfuscated,
            "method": args.method,
            "prior": _prior_payload(args.prior, args.prior_timeout),
            "beam_width": args.beam,
            "candidate_pool": args.pool,
            "prior_weight": args.prior_weight,
            "estimation": args.estimation,
            "family": args.family,
            "mode": args.mode,
            "nn_norm": args.norm,
            "seed": args.seed,
            "out": args.out,
        }
        if args.token_map:
            payload["token_map"] = {
                "prior_table": args.token_map,
                "restrict": not args.no_restrict,
            }
        return _call(args, "/api/attack", payload)

    if args.command == "evaluate":
        return _call(args, "/api/evaluate", {"truth": args.truth, "results": args.results})

    if args.command == "sweep":
        return _call(args, "/api/sweep", {"config_path": args.config})

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
