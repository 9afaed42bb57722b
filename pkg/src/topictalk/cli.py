"""Command-line front door: fit a model, serve the HTTP API, export topics."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .persistence import load_state
from .service import ServiceConfig, create_app, export_csv, fit


def _load_config(path: str | None) -> ServiceConfig:
    return ServiceConfig.from_file(path) if path else ServiceConfig()


def cmd_fit(args) -> int:
    config = _load_config(args.config)
    if args.state:
        config.state_path = args.state
    state = fit(config, corpus_path=args.corpus, n_topics=args.n_topics,
                min_cluster_size=args.min_cluster_size)
    for warning in getattr(state, "fit_warnings", []):
        print(f"warning: {warning}", file=sys.stderr)
    print(f"fitted {len(state.topics)} topics over {len(state.corpus)} documents")
    for t in state.topics:
        print(f"Topic {t.index}: {t.title} ({t.size} docs)")
    print(f"state written to {config.state_path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    config = _load_config(args.config)
    app = create_app(config)
    host, _, port = config.listen_address.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
    return 0


def cmd_export(args) -> int:
    state = load_state(args.state)
    if args.format == "csv":
        out = export_csv(state)
    else:
        out = json.dumps(
            [{"index": t.index, "title": t.title, "description": t.description,
              "size": t.size, "doc_ids": sorted(t.doc_ids)}
             for t in state.topics],
            indent=2, ensure_ascii=False)
    if args.output:
        Path(args.output).write_text(out, encoding="utf-8")
        print(f"wrote {args.output}")
    else:
        print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topictalk",
                                     description="Interactive topic modeling engine")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a topic model over a corpus file")
    p_fit.add_argument("--corpus", required=True, help="text/json/jsonl corpus file")
    p_fit.add_argument("--n-topics", type=int, default=None)
    p_fit.add_argument("--min-cluster-size", type=int, default=None)
    p_fit.add_argument("--config", default=None, help="service config JSON")
    p_fit.add_argument("--state", default=None, help="override state output path")
    p_fit.set_defaults(func=cmd_fit)

    p_serve = sub.add_parser("serve", help="serve the HTTP API")
    p_serve.add_argument("--config", default=None, help="service config JSON")
    p_serve.set_defaults(func=cmd_serve)

    p_export = sub.add_parser("export", help="export a fitted state")
    p_export.add_argument("--state", required=True)
    p_export.add_argument("--format", choices=["json", "csv"], default="json")
    p_export.add_argument("--output", default=None)
    p_export.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
