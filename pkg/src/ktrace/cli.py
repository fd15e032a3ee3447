"""Command-line entry point.

Subcommands: simulate, train, eval, predict, review, analyze. Settings
resolve in three layers: built-in defaults, then a ``key = value`` config
file, then explicit flags. All outputs land inside ``--out`` and every
random choice flows from ``--seed``, so identical invocations produce
byte-identical files.

numpy is imported lazily so ``--threads`` can pin the BLAS thread count
before it loads; ``--threads 1`` (the default) keeps runs bit-exact.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import (CheckpointError, ColdStartError, ConfigError,
                     DataFormatError, DivergenceError, KTraceError, MaskError,
                     ShapeError)

# key -> (type tag, default). "optfloat"/"optint" accept "none".
_KEY_SPEC: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "threads": ("int", 1),
    "out": ("path", None),
    "data": ("path", None),
    "tags": ("path", None),
    "truth": ("path", None),
    "checkpoint": ("path", None),
    "d_embed": ("int", 128),
    "d_lstm": ("int", 128),
    "lstm_layers": ("int", 3),
    "d_attn": ("int", 256),
    "head_dims": ("intlist", (512, 256, 128)),
    "attention": ("choice:additive,dot,none", "additive"),
    "encoder": ("choice:bilstm,lstm,fc", "bilstm"),
    "window": ("int", 50),
    "learning_rate": ("float", 0.001),
    "batch_size": ("int", 128),
    "max_epochs": ("int", 5),
    "patience": ("int", 5),
    "clip_norm": ("optfloat", 5.0),
    "precision": ("choice:float32,float64", "float32"),
    "split_ratios": ("floatlist", (0.8, 0.1, 0.1)),
    "split_seed": ("optint", None),
    "split_part": ("choice:train,val,test,all", "test"),
    "users": ("int", 100),
    "questions": ("int", 50),
    "num_tags": ("int", 10),
    "length": ("int", 20),
    "tags_min": ("int", 1),
    "tags_max": ("int", 3),
    "learning_gain": ("float", 0.02),
    "policy": ("choice:uniform,adaptive,sessions", "uniform"),
    "session_length": ("int", 8),
    "max_step": ("int", 50),
    "user": ("str", None),
    "pool": ("path", None),
    "k": ("int", 10),
    "threshold": ("float", 0.85),
    "neighbors_k": ("int", 3),
    "n_queries": ("int", 10),
    "n_triples": ("int", 100),
}

_EXIT_CODES: list[tuple[type, int]] = [
    (ConfigError, 2),
    (DataFormatError, 3),
    (CheckpointError, 4),
    (ShapeError, 5),
    (MaskError, 5),
    (ColdStartError, 6),
    (DivergenceError, 7),
]


def _convert(key: str, kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "optint":
            return None if raw.lower() == "none" else int(raw)
        if kind == "optfloat":
            return None if raw.lower() == "none" else float(raw)
        if kind == "intlist":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "floatlist":
            return tuple(float(v) for v in raw.split(","))
        if kind.startswith("choice:"):
            choices = kind.split(":", 1)[1].split(",")
            if raw not in choices:
                raise ValueError(f"must be one of {choices}")
            return raw
        return raw  # str / path
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; '#' starts a comment."""
    values: dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _KEY_SPEC:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _convert(key, _KEY_SPEC[key][0], value)
    return values


class RunConfig:
    """Fully resolved settings for one subcommand invocation."""

    def __init__(self, command: str, values: dict, explicit: set[str]):
        self.command = command
        self.values = values
        self.explicit = explicit

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def was_set(self, key: str) -> bool:
        return key in self.explicit

    def require(self, *keys: str) -> None:
        for key in keys:
            if self.values.get(key) is None:
                raise ConfigError(
                    f"{self.command} requires --{key.replace('_', '-')}")


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    values = {key: default for key, (_, default) in _KEY_SPEC.items()}
    explicit: set[str] = set()
    if getattr(ns, "config", None):
        file_values = parse_config_file(ns.config)
        values.update(file_values)
        explicit.update(file_values)
    for key in _KEY_SPEC:
        flag = getattr(ns, key, None)
        if flag is not None:
            values[key] = _convert(key, _KEY_SPEC[key][0], flag) \
                if isinstance(flag, str) else flag
            explicit.add(key)
    return RunConfig(ns.command, values, explicit)


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key = value settings file")
    for key in _KEY_SPEC:
        shared.add_argument(f"--{key.replace('_', '-')}", dest=key,
                            default=None, metavar="V")
    parser = argparse.ArgumentParser(
        prog="ktrace",
        description="knowledge-tracing engine: simulate, train, evaluate, "
                    "and serve review recommendations")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("simulate", "generate a synthetic corpus with ground truth"),
        ("train", "fit a model and save the best checkpoint"),
        ("eval", "score a dataset split and emit metric reports"),
        ("predict", "score a candidate pool for one user"),
        ("review", "recommendations and review pairing for one user"),
        ("analyze", "embedding neighbor and analogy reports"),
    ]:
        sub.add_parser(name, parents=[shared], help=help_text)
    return parser


def _set_thread_env(threads: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def _out_dir(cfg: RunConfig) -> Path:
    cfg.require("out")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_sequences(cfg: RunConfig):
    from .data import parse_interactions
    cfg.require("data")
    with open(cfg.data, "r", encoding="utf-8") as fh:
        sequences, _ = parse_interactions(fh)
    return sequences


def _load_tags(cfg: RunConfig):
    from .data import parse_tags
    if cfg.tags is None:
        return {}
    with open(cfg.tags, "r", encoding="utf-8") as fh:
        return parse_tags(fh)


def _split(cfg: RunConfig, sequences):
    from .data import split_by_user
    seed = cfg.split_seed if cfg.split_seed is not None else cfg.seed
    return split_by_user(sequences, tuple(cfg.split_ratios), seed=seed)


def _model_config(cfg: RunConfig, vocab: int):
    from .model import ModelConfig
    return ModelConfig(question_vocab=vocab, d_embed=cfg.d_embed,
                       d_lstm=cfg.d_lstm, lstm_layers=cfg.lstm_layers,
                       d_attn=cfg.d_attn, head_dims=tuple(cfg.head_dims),
                       attention_kind=cfg.attention, encoder_kind=cfg.encoder,
                       window=cfg.window)


def cmd_simulate(cfg: RunConfig) -> int:
    from .data import SimConfig, simulate, write_interactions, write_tags, \
        write_truth
    out = _out_dir(cfg)
    sim = SimConfig(n_users=cfg.users, n_questions=cfg.questions,
                    n_tags=cfg.num_tags, sequence_length=cfg.length,
                    tags_per_question=(cfg.tags_min, cfg.tags_max),
                    learning_gain=cfg.learning_gain, policy=cfg.policy,
                    session_length=cfg.session_length, seed=cfg.seed)
    sequences, catalog, truth = simulate(sim)
    with open(out / "interactions.csv", "w", encoding="utf-8") as fh:
        write_interactions(sequences, fh)
    with open(out / "tags.csv", "w", encoding="utf-8") as fh:
        write_tags(catalog.tags, fh)
    with open(out / "truth.csv", "w", encoding="utf-8") as fh:
        write_truth(truth, fh)
    print(f"simulated {len(sequences)} users x {sim.sequence_length} steps "
          f"over {sim.n_questions} questions -> {out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    from .data import build_catalog
    from .training import (EPOCH_LOG_HEADER, TrainConfig, fit,
                           save_checkpoint)
    out = _out_dir(cfg)
    sequences = _load_sequences(cfg)
    tags = _load_tags(cfg)
    catalog = build_catalog(sequences, tags)
    train_seqs, val_seqs, _ = _split(cfg, sequences)
    model_config = _model_config(cfg, catalog.vocab)
    train_config = TrainConfig(learning_rate=cfg.learning_rate,
                               batch_size=cfg.batch_size,
                               max_epochs=cfg.max_epochs,
                               patience=cfg.patience, seed=cfg.seed,
                               precision=cfg.precision,
                               clip_norm=cfg.clip_norm)
    checkpoint, stats = fit(train_seqs, val_seqs, catalog, model_config,
                            train_config,
                            log_fn=lambda s: print(s.format_line()))
    save_checkpoint(checkpoint, out / "checkpoint.bin")
    with open(out / "epochs.tsv", "w", encoding="utf-8") as fh:
        fh.write(EPOCH_LOG_HEADER + "\n")
        for entry in stats:
            fh.write(entry.format_line() + "\n")
    print(f"best epoch {checkpoint.meta['epoch']} "
          f"val_auc {checkpoint.meta['val_auc']:.6f} -> {out}")
    return 0


def _pick_split(cfg: RunConfig, sequences):
    if cfg.split_part == "all":
        return sequences
    parts = dict(zip(("train", "val", "test"), _split(cfg, sequences)))
    return parts[cfg.split_part]


def cmd_eval(cfg: RunConfig) -> int:
    from . import evaluation
    from .data import attach_outcomes, parse_truth
    from .training import load_checkpoint
    out = _out_dir(cfg)
    cfg.require("checkpoint")
    checkpoint = load_checkpoint(cfg.checkpoint)
    sequences = _load_sequences(cfg)
    tags = _load_tags(cfg)
    catalog = checkpoint.catalog(tags)
    part = _pick_split(cfg, sequences)
    window = cfg.window if cfg.was_set("window") else None
    events = evaluation.predict_events(checkpoint.params, checkpoint.config,
                                       catalog, part, window=window)
    if events.prob.size == 0:
        raise ConfigError("selected split has no scoreable positions")
    report = evaluation.binary_metrics(events.prob, events.label)
    rows = [report.to_dict()]
    columns = ["f1", "auc", "acc", "tp", "fp", "tn", "fn", "n"]
    with open(out / "metrics.tsv", "w", encoding="utf-8") as fh:
        evaluation.write_tsv(rows, columns, fh)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        evaluation.write_jsonl(rows, fh)
    for metric in ("auc", "f1", "acc"):
        curve = evaluation.per_timestep(checkpoint.params, checkpoint.config,
                                        catalog, part, metric=metric,
                                        max_step=cfg.max_step, window=window)
        curve_rows = evaluation.curve_rows(curve)
        with open(out / f"timestep_{metric}.tsv", "w", encoding="utf-8") as fh:
            evaluation.write_tsv(curve_rows, ["step", "value", "count"], fh)
        with open(out / f"timestep_{metric}.jsonl", "w", encoding="utf-8") as fh:
            evaluation.write_jsonl(curve_rows, fh)
    if tags:
        attn = evaluation.attention_tag_report(checkpoint.params,
                                               checkpoint.config, catalog,
                                               part, window=window)
        attn_rows = evaluation.report_rows(attn)
        with open(out / "attention_tags.tsv", "w", encoding="utf-8") as fh:
            evaluation.write_tsv(attn_rows, ["rank", "mean_ratio", "count"], fh)
        with open(out / "attention_tags.jsonl", "w", encoding="utf-8") as fh:
            evaluation.write_jsonl(attn_rows, fh)
    if cfg.truth is not None:
        with open(cfg.truth, "r", encoding="utf-8") as fh:
            truth = parse_truth(fh)
        joined = [row for row in attach_outcomes(truth, part) if row.step >= 2]
        oracle = evaluation.oracle_auc(joined)
        model_auc = report.auc if report.auc is not None else 0.5
        oracle_rows = [{"model_auc": model_auc, "oracle_auc": oracle,
                        "ratio": model_auc / oracle if oracle else 0.0,
                        "events": len(joined)}]
        with open(out / "oracle.tsv", "w", encoding="utf-8") as fh:
            evaluation.write_tsv(oracle_rows,
                                 ["model_auc", "oracle_auc", "ratio", "events"],
                                 fh)
    auc_text = "n/a" if report.auc is None else f"{report.auc:.6f}"
    print(f"eval[{cfg.split_part}] n={report.n} f1={report.f1:.6f} "
          f"auc={auc_text} acc={report.acc:.6f} -> {out}")
    return 0


def _user_history(sequences, user_id: str):
    for seq in sequences:
        if seq.user_id == user_id:
            return [(it.question_id, it.correct) for it in seq.interactions]
    return []


def _load_pool(cfg: RunConfig, catalog) -> list[str]:
    if cfg.pool is None:
        return list(catalog.ids)
    with open(cfg.pool, "r", encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def cmd_predict(cfg: RunConfig) -> int:
    from . import evaluation
    from .review import Predictor, score_pool
    from .training import load_checkpoint
    out = _out_dir(cfg)
    cfg.require("checkpoint", "user")
    checkpoint = load_checkpoint(cfg.checkpoint)
    predictor = Predictor.from_checkpoint(checkpoint, _load_tags(cfg))
    history = _user_history(_load_sequences(cfg), cfg.user)
    pool = _load_pool(cfg, predictor.catalog)
    scores = score_pool(predictor, history, pool)
    rows = [{"question_id": s.question_id, "prob": s.prob} for s in scores]
    with open(out / "scores.tsv", "w", encoding="utf-8") as fh:
        evaluation.write_tsv(rows, ["question_id", "prob"], fh)
    with open(out / "scores.jsonl", "w", encoding="utf-8") as fh:
        evaluation.write_jsonl(rows, fh)
    print(f"scored {len(rows)} candidates for {cfg.user} "
          f"(history {len(history)}) -> {out}")
    return 0


def cmd_review(cfg: RunConfig) -> int:
    from . import evaluation
    from .review import Predictor, recommend_next, score_pool, smart_review_pair
    from .training import load_checkpoint
    out = _out_dir(cfg)
    cfg.require("checkpoint", "user")
    checkpoint = load_checkpoint(cfg.checkpoint)
    predictor = Predictor.from_checkpoint(checkpoint, _load_tags(cfg))
    history = _user_history(_load_sequences(cfg), cfg.user)
    pool = _load_pool(cfg, predictor.catalog)
    scores = score_pool(predictor, history, pool)
    answered = {qid for qid, _ in history}
    recs = recommend_next(scores, answered, eliminate_above=cfg.threshold,
                          k=cfg.k)
    by_id = {s.question_id: s for s in scores}
    rec_rows = [{"question_id": qid, "prob": by_id[qid].prob} for qid in recs]
    with open(out / "recommendations.tsv", "w", encoding="utf-8") as fh:
        evaluation.write_tsv(rec_rows, ["question_id", "prob"], fh)
    pair_rows = []
    if recs:
        pair = smart_review_pair(predictor, history, recs[0])
        if pair is not None:
            pair_rows.append({
                "weak_question_id": pair.weak_question_id,
                "review_question_id": pair.review_question_id,
                "attention_weight": pair.attention_weight,
                "original_response": pair.original_response,
            })
    with open(out / "review_pair.tsv", "w", encoding="utf-8") as fh:
        evaluation.write_tsv(pair_rows,
                             ["weak_question_id", "review_question_id",
                              "attention_weight", "original_response"], fh)
    pair_text = (f"review {pair_rows[0]['review_question_id']} before "
                 f"{pair_rows[0]['weak_question_id']}" if pair_rows
                 else "no review pair (nothing answered incorrectly)")
    print(f"recommended {len(recs)} of {len(pool)} for {cfg.user}; "
          f"{pair_text} -> {out}")
    return 0


def cmd_analyze(cfg: RunConfig) -> int:
    from . import evaluation
    from .training import load_checkpoint
    out = _out_dir(cfg)
    cfg.require("checkpoint")
    checkpoint = load_checkpoint(cfg.checkpoint)
    catalog = checkpoint.catalog(_load_tags(cfg))
    neighbor_rows = evaluation.embedding_neighbors(
        checkpoint.params, catalog, k=cfg.neighbors_k,
        n_queries=cfg.n_queries, seed=cfg.seed)
    with open(out / "neighbors.tsv", "w", encoding="utf-8") as fh:
        evaluation.write_tsv(neighbor_rows,
                             ["query", "query_tags", "rank", "neighbor",
                              "similarity", "neighbor_tags"], fh)
    with open(out / "neighbors.jsonl", "w", encoding="utf-8") as fh:
        evaluation.write_jsonl(neighbor_rows, fh)
    analogy_rows = evaluation.embedding_analogies(
        checkpoint.params, catalog, n_triples=cfg.n_triples, seed=cfg.seed)
    with open(out / "analogies.tsv", "w", encoding="utf-8") as fh:
        evaluation.write_tsv(analogy_rows,
                             ["a", "b", "c", "result", "similarity",
                              "predicted_tags", "result_tags", "overlap"], fh)
    with open(out / "analogies.jsonl", "w", encoding="utf-8") as fh:
        evaluation.write_jsonl(analogy_rows, fh)
    print(f"wrote neighbor and analogy reports for "
          f"{len(catalog.ids)} questions -> {out}")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "review": cmd_review,
    "analyze": cmd_analyze,
}


def dispatch(ns: argparse.Namespace) -> int:
    try:
        cfg = resolve_config(ns)
        _set_thread_env(cfg.threads)
        return _COMMANDS[cfg.command](cfg)
    except tuple(t for t, _ in _EXIT_CODES) as exc:
        for err_type, code in _EXIT_CODES:
            if isinstance(exc, err_type):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise AssertionError("unreachable")
    except (KTraceError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> None:
    ns = build_parser().parse_args(argv)
    sys.exit(dispatch(ns))


if __name__ == "__main__":
    main()
