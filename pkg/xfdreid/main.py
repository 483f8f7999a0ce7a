"""
Command Line Interface
Subcommands wiring fixtures, training, pooling, re-ranking and evaluation
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

try:
    from . import __version__
    from .config import POOLING_MODES, RerankParams, load_json_config, resolve_run_config
    from .datamodel import (
        Domain,
        Split,
        file_sha256,
        load_dataset,
        read_feature_file,
        write_feature_file,
    )
    from .evaluation import (
        AblationCell,
        ablation_run,
        evaluate,
        render_report_table,
        write_report,
    )
    from .exceptions import UsageError, XfdReidError
    from .gradcheck import run_gradcheck
    from .pooling import AttentionPoolParams, NeckParams, embed_dataset
    from .retrieval import (
        EmbeddingSet,
        KReciprocalReranker,
        cosine_distance_matrix,
        write_distance_matrix,
    )
    from .synthfix import FixtureConfig, generate, write_fixture
    from .trainer import load_head, save_head, train
except ImportError:
    # Absolute import fallback (for direct script execution)
    from xfdreid import __version__
    from xfdreid.config import POOLING_MODES, RerankParams, load_json_config, resolve_run_config
    from xfdreid.datamodel import (
        Domain,
        Split,
        file_sha256,
        load_dataset,
        read_feature_file,
        write_feature_file,
    )
    from xfdreid.evaluation import (
        AblationCell,
        ablation_run,
        evaluate,
        render_report_table,
        write_report,
    )
    from xfdreid.exceptions import UsageError, XfdReidError
    from xfdreid.gradcheck import run_gradcheck
    from xfdreid.pooling import AttentionPoolParams, NeckParams, embed_dataset
    from xfdreid.retrieval import (
        EmbeddingSet,
        KReciprocalReranker,
        cosine_distance_matrix,
        write_distance_matrix,
    )
    from xfdreid.synthfix import FixtureConfig, generate, write_fixture
    from xfdreid.trainer import load_head, save_head, train


EXIT_OK = 0
EXIT_DOMAIN_ERROR = 1
EXIT_USAGE = 2

LOG_FORMAT = '%(asctime)s.%(msecs)03d - %(levelname)s - %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'


def setup_logging(command, level="INFO", log_file=None):
    """
    Setup logging system

    Args:
        command: Subcommand name for the banner
        level: Log level name
        log_file: Optional log file (UTF-8)

    Returns:
        list: Installed handlers (removed again by dispatch)
    """
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        datefmt=LOG_DATEFMT,
        handlers=handlers,
        force=True,
    )

    logging.info("=" * 60)
    logging.info(f"XFDREID {command.upper()} (v{__version__})")
    if log_file:
        logging.info(f"Log file: {log_file}")
    logging.info("=" * 60)
    return handlers


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--log-file", default=None)
    common.add_argument("--threads", type=int, default=None,
                        help="worker count (fallback: XFDREID_THREADS, default 1)")
    common.add_argument("--precision", choices=["f32", "f64"], default=None)
    return common


def _config_arguments(parser):
    parser.add_argument("--preset", choices=["ours", "baseline"], default="ours")
    parser.add_argument("--stage", type=int, choices=[1, 2], default=1)
    parser.add_argument("--config", dest="config_path", default=None,
                        help="JSON file with flat config keys")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--base-lr", type=float, default=None)
    parser.add_argument("--max-epochs", type=int, default=None)
    parser.add_argument("--batch", type=int, default=None)
    parser.add_argument("--weight-decay", type=float, default=None)


def _rerank_arguments(parser):
    parser.add_argument("--k1", type=int, default=None)
    parser.add_argument("--k2", type=int, default=None)
    parser.add_argument("--lambda", dest="lambda_value", type=float, default=None)
    parser.add_argument("--gallery-only", action="store_true",
                        help="draw re-ranking neighbours from the gallery only")


def _dataset_arguments(parser, head=True):
    parser.add_argument("--features", required=True)
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--flip-features", default=None)
    parser.add_argument("--no-flip", action="store_true", help="ignore flipped features")
    parser.add_argument("--mode", choices=POOLING_MODES, default=None)
    if head:
        parser.add_argument("--head", default=None, help="trained head JSON")


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="xfdreid",
        description="Temporal attention pooling and k-reciprocal re-ranking for "
                    "aerial-ground tracklet re-identification")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic fixture")
    p.add_argument("--config", dest="fixture_config", default=None, help="fixture JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--num-ids", type=int, default=None)
    p.add_argument("--corrupt-frac", type=float, default=None)
    p.add_argument("--with-flip", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train the pooling head of one stage")
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=POOLING_MODES, default=None)
    p.add_argument("--init-head", default=None, help="start from a previous stage's head")
    p.add_argument("--out", required=True)
    _config_arguments(p)

    p = sub.add_parser("pool", parents=[common], help="write pooled tracklet embeddings")
    _dataset_arguments(p)
    p.add_argument("--split", choices=[s.value for s in Split], default=None)
    p.add_argument("--domain", choices=[d.value for d in Domain], default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerank", parents=[common], help="query x gallery distance matrix")
    p.add_argument("--query-emb", required=True)
    p.add_argument("--gallery-emb", required=True)
    p.add_argument("--raw", action="store_true", help="raw cosine distances, no re-ranking")
    p.add_argument("--out", required=True)
    _rerank_arguments(p)

    p = sub.add_parser("eval", parents=[common], help="per-protocol and overall metrics")
    _dataset_arguments(p)
    rerank = p.add_mutually_exclusive_group()
    rerank.add_argument("--rerank", action="store_true", help="re-rank (default for preset ours)")
    rerank.add_argument("--no-rerank", action="store_true", help="raw cosine distances only")
    p.add_argument("--out", default=None)
    _rerank_arguments(p)
    _config_arguments(p)

    p = sub.add_parser("ablate", parents=[common], help="pooling x re-ranking grid")
    _dataset_arguments(p, head=False)
    p.add_argument("--head-mean", default=None)
    p.add_argument("--head-attn", default=None)
    p.add_argument("--modes", nargs="+", choices=POOLING_MODES, default=list(POOLING_MODES))
    p.add_argument("--rerank-params", nargs="*", default=["28,6,0.28"], metavar="K1,K2,LAMBDA")
    p.add_argument("--gallery-only", action="store_true")
    p.add_argument("--out", default=None)
    _config_arguments(p)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-5)

    p = sub.add_parser("config", parents=[common], help="print the resolved run config")
    p.add_argument("--mode", choices=POOLING_MODES, default=None)
    _rerank_arguments(p)
    _config_arguments(p)

    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _require_files(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"input file not found: {p}")


def _overrides(args):
    values = {
        "seed": getattr(args, "seed", None),
        "base_lr": getattr(args, "base_lr", None),
        "max_epochs": getattr(args, "max_epochs", None),
        "batch": getattr(args, "batch", None),
        "weight_decay": getattr(args, "weight_decay", None),
        "pooling_mode": getattr(args, "mode", None),
        "k1": getattr(args, "k1", None),
        "k2": getattr(args, "k2", None),
        "lambda_value": getattr(args, "lambda_value", None),
        "threads": args.threads,
        "precision": args.precision,
    }
    if getattr(args, "gallery_only", False):
        values["gallery_only_neighbors"] = True
    if getattr(args, "rerank", False):
        values["rerank_enabled"] = True
    if getattr(args, "no_rerank", False):
        values["rerank_enabled"] = False
    if getattr(args, "no_flip", False):
        values["use_flip"] = False
    return values


def _run_config(args):
    _require_files(getattr(args, "config_path", None))
    return resolve_run_config(getattr(args, "preset", "ours"), getattr(args, "stage", 1),
                              getattr(args, "config_path", None), _overrides(args))


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_meta(path, run_config, input_hash, extra=None):
    """<path>.meta.json sidecar of a binary artifact"""
    doc = {"config": run_config.to_dict(), "input_sha256": input_hash}
    doc.update(extra or {})
    meta_path = Path(f"{path}.meta.json")
    _write_json(meta_path, doc)
    return meta_path


def _load(args, run_config):
    flip = None if args.no_flip else args.flip_features
    _require_files(args.features, args.manifest, flip)
    dataset = load_dataset(args.features, args.manifest, flip, run_config.dtype)
    return dataset, file_sha256([args.features, args.manifest, flip])


def _pipeline(head_path, mode, run_config, dataset):
    """Attention params, neck and pooling mode for embedding a dataset"""
    if head_path is not None:
        _require_files(head_path)
        params, head_mode, _ = load_head(head_path, run_config.dtype)
        return params.attention, params.neck, mode or head_mode, file_sha256([head_path])
    # untrained pipeline: w = 0, no neck affine
    attention = AttentionPoolParams.zeros(dataset.feature_dim, run_config.dtype)
    neck = NeckParams(enabled=run_config.train.neck_enabled)
    return attention, neck, mode or run_config.train.pooling_mode, None


def _embed(dataset, head_path, mode, run_config):
    attention, neck, mode, head_hash = _pipeline(head_path, mode, run_config, dataset)
    embeddings = embed_dataset(dataset, mode, attention, neck, use_flip=run_config.use_flip)
    return embeddings, mode, head_hash


def _parse_rerank_params(token, gallery_only):
    try:
        k1, k2, lam = token.split(",")
        return RerankParams(int(k1), int(k2), float(lam), gallery_only)
    except ValueError:
        raise UsageError(f"bad re-ranking parameters {token!r}, expected K1,K2,LAMBDA") from None


def _load_embeddings(path):
    _require_files(path)
    _, seq_len, sequences = read_feature_file(path, np.float64)
    if seq_len != 1:
        raise UsageError(f"{path}: expected pooled embeddings (T=1), got T={seq_len}")
    matrix = np.stack([s.frames[0] for s in sequences])
    # undo float32 storage drift
    return matrix / np.linalg.norm(matrix, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    values = {}
    if args.fixture_config:
        _require_files(args.fixture_config)
        values = load_json_config(args.fixture_config)
    for key in ("seed", "num_ids", "corrupt_frac"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    if args.with_flip:
        values["with_flip"] = True
    config = FixtureConfig.from_dict(values)
    paths = write_fixture(generate(config), args.out_dir)
    _write_json(Path(args.out_dir) / "fixture.json", config.to_dict())
    for role, path in sorted(paths.items()):
        print(f"{role}: {path}")
    return EXIT_OK


def cmd_train(args):
    run_config = _run_config(args)
    _require_files(args.features, args.manifest, args.init_head)
    dataset = load_dataset(args.features, args.manifest, None, run_config.dtype)
    input_hash = file_sha256([args.features, args.manifest, args.init_head])

    initial = None
    if args.init_head:
        initial = load_head(args.init_head, run_config.dtype)[0]

    result = train(dataset, run_config.train, initial)
    save_head(args.out, result.params, run_config.train.pooling_mode, {
        "config": run_config.to_dict(),
        "input_sha256": input_hash,
        "seed": run_config.train.seed,
        "history": result.history,
    })
    return EXIT_OK


def cmd_pool(args):
    run_config = _run_config(args)
    dataset, input_hash = _load(args, run_config)
    embeddings, mode, head_hash = _embed(dataset, args.head, args.mode, run_config)

    records = dataset.records
    if args.split:
        records = [r for r in records if r.split == Split(args.split)]
    if args.domain:
        records = [r for r in records if r.domain == Domain(args.domain)]
    write_feature_file(args.out, [embeddings[r.tracklet_index][None, :] for r in records])
    write_meta(args.out, run_config, input_hash, {
        "pooling_mode": mode,
        "head_sha256": head_hash,
        "tracklet_indices": [r.tracklet_index for r in records],
    })
    logging.info(f"[POOL] {len(records)} embeddings written to {args.out}")
    return EXIT_OK


def cmd_rerank(args):
    run_config = _run_config(args)
    queries = EmbeddingSet(_load_embeddings(args.query_emb))
    gallery = EmbeddingSet(_load_embeddings(args.gallery_emb))
    if args.raw:
        distances = cosine_distance_matrix(queries, gallery)
    else:
        distances = KReciprocalReranker(run_config.rerank, run_config.threads).rerank(
            queries, gallery)
    write_distance_matrix(args.out, distances)
    write_meta(args.out, run_config, file_sha256([args.query_emb, args.gallery_emb]),
               {"stage": distances.stage.value})
    return EXIT_OK


def _fingerprint(run_config, input_hash, mode, head_hash):
    return {
        "pooling_mode": mode,
        "rerank": asdict(run_config.rerank) if run_config.rerank_enabled else None,
        "seed": run_config.train.seed,
        "input_sha256": input_hash,
        "head_sha256": head_hash,
        "run": run_config.to_dict(),
    }


def cmd_eval(args):
    run_config = _run_config(args)
    dataset, input_hash = _load(args, run_config)
    embeddings, mode, head_hash = _embed(dataset, args.head, args.mode, run_config)
    rerank = run_config.rerank if run_config.rerank_enabled else None
    report = evaluate(dataset, embeddings, rerank, run_config.threads,
                      _fingerprint(run_config, input_hash, mode, head_hash))
    print(render_report_table(report))
    if args.out:
        write_report(args.out, report)
    return EXIT_OK


def cmd_ablate(args):
    run_config = _run_config(args)
    dataset, input_hash = _load(args, run_config)
    heads = {"mean": args.head_mean, "attn": args.head_attn}

    embeddings_by_mode = {}
    for mode in args.modes:
        embeddings_by_mode[mode] = _embed(dataset, heads[mode], mode, run_config)[0]

    grid = [_parse_rerank_params(t, args.gallery_only) for t in args.rerank_params]
    cells = [AblationCell(mode, rerank) for mode in args.modes for rerank in [None] + grid]
    table = ablation_run(dataset, embeddings_by_mode, cells, run_config.threads, {
        "seed": run_config.train.seed,
        "input_sha256": input_hash,
        "head_sha256": {m: file_sha256([heads[m]]) if heads[m] else None for m in args.modes},
    })
    print(table.render())
    if args.out:
        _write_json(args.out, table.to_dict())
    return EXIT_OK


def cmd_gradcheck(args):
    summary = run_gradcheck(args.cases, args.seed, args.tolerance)
    print(summary.render())
    for failure in summary.failures[:20]:
        logging.error(f"[GRADCHECK] {failure}")
    return EXIT_OK if summary.passed else EXIT_DOMAIN_ERROR


def cmd_config(args):
    print(json.dumps(_run_config(args).to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "pool": cmd_pool,
    "rerank": cmd_rerank,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "config": cmd_config,
}


def dispatch(argv=None):
    """
    Parse arguments and run one subcommand

    Args:
        argv: Argument list (default: sys.argv[1:])

    Returns:
        int: 0 success, 1 domain error, 2 usage error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help / --version exit 0, argparse usage errors exit 2
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    handlers = setup_logging(args.command, args.log_level, args.log_file)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"xfdreid {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except XfdReidError as e:
        logging.error(f"[CLI] {type(e).__name__}: {e}")
        return EXIT_DOMAIN_ERROR
    finally:
        root = logging.getLogger()
        for handler in handlers:
            root.removeHandler(handler)
            handler.close()


def main():
    """Main function"""
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
