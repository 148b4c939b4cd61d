"""Command-line entry points: train, evaluate, predict, gradcheck, gen-synth.

Run configuration is a flat ``key = value`` text file plus ``--set`` command
line overrides, so an experiment is fully described by one greppable file.
Every accepted key has a documented default (see the ``config-reference``
subcommand); unknown keys are rejected by name.

Exit codes: 0 success, 1 configuration or I/O error, 2 training divergence,
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from .autodiff import ParamStore
from .data import (Dataset, LabelSet, Vocabulary, load_conll, load_embeddings,
                   make_hmm_spec, read_conll_sentences, synthetic_splits)
from .evaluation import first_non_bioes, metrics_report
from .gradcheck import format_report, run_gradcheck
from .infnet import discretize, infer
from .objectives import MODES, LossConfig
from .trainer import (DEV_METRICS, OptimizerConfig, TrainConfig, TrainingDiverged,
                      build_system, predict_indices, train)


class CliError(Exception):
    """User-facing problem with configuration or input files."""


# ---------------------------------------------------------------------------
# typed config keys
# ---------------------------------------------------------------------------

def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _int(raw: str) -> int:
    return int(raw)


def _float(raw: str) -> float:
    return float(raw)


def _opt_int(raw: str):
    return None if raw.lower() == "none" else int(raw)


def _auto_float(raw: str):
    return None if raw.lower() == "auto" else float(raw)


def _choice(*options):
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {raw!r}")
        return raw
    return parse


def _str(raw: str) -> str:
    return raw


CONFIG_KEYS = {
    # data and artifacts
    "train_data": (_str, "", "training corpus in CoNLL column format"),
    "dev_data": (_str, "", "development corpus for model selection"),
    "test_data": (_str, "", "optional held-out corpus scored after training"),
    "token_column": (_int, "0", "whitespace-split column holding tokens"),
    "label_column": (_int, "1", "column holding gold labels"),
    "lowercase": (_bool, "false", "lowercase tokens when building the vocabulary"),
    "bioes": (_bool, "false", "convert BIO labels to BIOES on load"),
    "embeddings": (_str, "", "optional pretrained embedding text file"),
    "model_out": (_str, "model.spen", "trained parameter file; a .meta.json sidecar "
                                      "is written next to it"),
    "log_out": (_str, "", "trajectory JSONL path (default: <model_out>.trajectory.jsonl)"),
    "metrics_out": (_str, "", "metrics JSON path (default: <model_out>.metrics.json)"),
    # loss
    "mode": (_choice(*MODES), "compound", "training objective"),
    "lambda_weight": (_float, "1.0", "weight of the test-net term in the compound objective"),
    "ce_weight": (_float, "1.0", "weight of the per-position cross-entropy terms"),
    "truncate_energy_step": (_bool, "true", "hinge the brackets on energy updates"),
    "truncate_inference_step": (_bool, "false", "hinge the brackets on net updates "
                                                "(known failure mode, kept for study)"),
    # model sizes
    "embed_dim": (_int, "64", "token embedding dimension"),
    "hidden": (_int, "64", "encoder state size per direction"),
    "parameterization": (_choice("separated", "shared", "stacked"), "separated",
                         "how the two inference nets share structure"),
    "global_variant": (_choice("none", "ge-a", "ge-b", "ge-c"), "none",
                       "label-LM energy: none, forward, both directions, "
                       "or both plus word-conditioned"),
    "global_gamma": (_float, "1.0", "weight of the word-conditioned label-LM terms"),
    "tlm_hidden": (_opt_int, "none", "label-LM state size (default: hidden)"),
    "tlm_label_embed": (_int, "32", "label embedding size inside the label LM"),
    "tlm_word_embed": (_int, "32", "word embedding size inside the label LM"),
    # optimization
    "k": (_int, "1", "inference-net updates per energy update"),
    "epochs": (_int, "30", "maximum training epochs"),
    "batch_size": (_int, "32", "examples per minibatch (uniform length)"),
    "seed": (_int, "0", "seed for all randomness in the run"),
    "dropout_keep": (_float, "1.0", "keep probability on encoder outputs"),
    "patience": (_int, "10", "dev evaluations without improvement before stopping"),
    "dev_metric": (_choice(*DEV_METRICS), "accuracy", "model-selection metric"),
    "energy_algo": (_choice("adam", "sgd-momentum"), "adam", "energy optimizer"),
    "energy_lr": (_float, "0.0005", "energy learning rate"),
    "inference_algo": (_choice("auto", "adam", "sgd-momentum"), "auto",
                       "net optimizer; auto picks sgd-momentum with cross entropy "
                       "on, adam otherwise"),
    "inference_lr": (_auto_float, "auto", "net learning rate; auto picks 0.1 for "
                                          "sgd-momentum, 0.0005 for adam"),
    "inference_momentum": (_float, "0.9", "momentum when the net optimizer is sgd"),
    "fine_tune_steps": (_opt_int, "none", "post-training test-net passes; default "
                                          "1 in margin-rescaled mode, else 0"),
}


def default_config() -> dict:
    return {key: parse(raw) for key, (parse, raw, _) in CONFIG_KEYS.items()}


def apply_setting(resolved: dict, key: str, raw: str, where: str) -> None:
    if key not in CONFIG_KEYS:
        raise CliError(f"{where}: unknown config key '{key}'")
    parse = CONFIG_KEYS[key][0]
    try:
        resolved[key] = parse(raw.strip())
    except ValueError as e:
        raise CliError(f"{where}: bad value for '{key}': {e}") from None


def read_config_file(path: str, resolved: dict) -> None:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise CliError(f"cannot read config file: {e}") from None
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, eq, raw = text.partition("=")
        if not eq:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {text!r}")
        apply_setting(resolved, key.strip(), raw, f"{path}:{lineno}")


def resolve_config(config_path: str | None, overrides: list[str]) -> dict:
    resolved = default_config()
    if config_path:
        read_config_file(config_path, resolved)
    for setting in overrides:
        key, eq, raw = setting.partition("=")
        if not eq:
            raise CliError(f"--set expects key=value, got {setting!r}")
        apply_setting(resolved, key.strip(), raw, "--set")
    return resolved


def train_config_from(cfg: dict) -> TrainConfig:
    loss = LossConfig(mode=cfg["mode"], lambda_weight=cfg["lambda_weight"],
                      ce_weight=cfg["ce_weight"],
                      truncate_energy_step=cfg["truncate_energy_step"],
                      truncate_inference_step=cfg["truncate_inference_step"])
    inference_opt = None
    if cfg["inference_algo"] != "auto":
        algo = cfg["inference_algo"]
        lr = cfg["inference_lr"]
        if lr is None:
            lr = 0.1 if algo == "sgd-momentum" else 5e-4
        inference_opt = OptimizerConfig(algo=algo, lr=lr,
                                        momentum=cfg["inference_momentum"])
    try:
        return TrainConfig(
            k=cfg["k"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
            seed=cfg["seed"], loss=loss, parameterization=cfg["parameterization"],
            global_variant=cfg["global_variant"], global_gamma=cfg["global_gamma"],
            embed_dim=cfg["embed_dim"], hidden=cfg["hidden"],
            tlm_hidden=cfg["tlm_hidden"], tlm_label_embed=cfg["tlm_label_embed"],
            tlm_word_embed=cfg["tlm_word_embed"], dropout_keep=cfg["dropout_keep"],
            patience=cfg["patience"], dev_metric=cfg["dev_metric"],
            energy_opt=OptimizerConfig(algo=cfg["energy_algo"], lr=cfg["energy_lr"]),
            inference_opt=inference_opt, fine_tune_steps=cfg["fine_tune_steps"])
    except ValueError as e:
        raise CliError(str(e)) from None


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _meta_path(model_path: str) -> str:
    return model_path + ".meta.json"


def save_model(model_path: str, store: ParamStore, cfg: dict, vocab: Vocabulary,
               labels: LabelSet) -> None:
    store.save(model_path)
    meta = {"config": cfg, "vocab": list(vocab.index_to_token[2:]),
            "lowercase": vocab.lowercase, "labels": list(labels.labels)}
    with open(_meta_path(model_path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_model(model_path: str):
    """Rebuild the trained system: structures from the sidecar config, values
    from the parameter file, with the name sets verified against each other."""
    try:
        with open(_meta_path(model_path), encoding="utf-8") as fh:
            meta = json.load(fh)
    except OSError as e:
        raise CliError(f"cannot read model sidecar: {e}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"{_meta_path(model_path)}: not valid JSON: {e}") from None
    cfg = default_config()
    for key, value in meta["config"].items():
        if key not in cfg:
            raise CliError(f"{_meta_path(model_path)}: unknown config key '{key}'")
        cfg[key] = value
    vocab = Vocabulary.build(meta["vocab"], lowercase=meta["lowercase"])
    labels = LabelSet.build(meta["labels"])
    store, model, net = build_system(train_config_from(cfg), vocab.size,
                                     labels.size, np.random.default_rng(0))
    try:
        loaded = ParamStore.load(model_path)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load model parameters: {e}") from None
    if set(loaded.names()) != set(store.names()):
        missing = sorted(set(store.names()) - set(loaded.names()))
        extra = sorted(set(loaded.names()) - set(store.names()))
        raise CliError(f"model file does not match its sidecar config "
                       f"(missing {missing}, unexpected {extra})")
    try:
        store.restore(loaded.snapshot())
    except ValueError as e:
        raise CliError(f"model file does not match its sidecar config: {e}") from None
    return store, model, net, vocab, labels, cfg


def _load_split(path: str, cfg: dict, vocab=None, labels=None) -> Dataset:
    try:
        return load_conll(path, token_column=cfg["token_column"],
                          label_column=cfg["label_column"], vocab=vocab,
                          labels=labels, lowercase=cfg["lowercase"],
                          bioes=cfg["bioes"])
    except OSError as e:
        raise CliError(f"cannot read corpus: {e}") from None
    except ValueError as e:
        raise CliError(str(e)) from None


def write_conll(path: str, sentences) -> None:
    """Two-column token<TAB>label output, blank line between sentences."""
    with open(path, "w", encoding="utf-8") as fh:
        for tokens, labs in sentences:
            for tok, lab in zip(tokens, labs):
                fh.write(f"{tok}\t{lab}\n")
            fh.write("\n")


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set or [])
    for required in ("train_data", "dev_data"):
        if not cfg[required]:
            raise CliError(f"config key '{required}' is required for training")
    train_cfg = train_config_from(cfg)
    train_ds = _load_split(cfg["train_data"], cfg)
    dev_ds = _load_split(cfg["dev_data"], cfg, train_ds.vocab, train_ds.labels)
    test_ds = None
    if cfg["test_data"]:
        test_ds = _load_split(cfg["test_data"], cfg, train_ds.vocab, train_ds.labels)
    if cfg["embeddings"]:
        try:
            emb, coverage = load_embeddings(cfg["embeddings"], train_ds.vocab,
                                            cfg["embed_dim"],
                                            np.random.default_rng(cfg["seed"]))
        except (OSError, ValueError) as e:
            raise CliError(f"cannot load embeddings: {e}") from None
        print(f"embeddings cover {coverage:.1%} of the vocabulary", file=sys.stderr)
        train_cfg = dataclasses.replace(train_cfg, emb_init=emb)

    try:
        result = train(train_ds, dev_ds, train_cfg)
    except ValueError as e:
        raise CliError(str(e)) from None

    save_model(cfg["model_out"], result.store, cfg, train_ds.vocab, train_ds.labels)
    result.log.save(cfg["log_out"] or cfg["model_out"] + ".trajectory.jsonl")

    metrics = {"best_dev_metric": result.best_dev,
               "early_stop_epoch": result.best_epoch,
               "n_epochs": result.n_epochs,
               "dev": _score(dev_ds, result.net)}
    if test_ds is not None:
        metrics["test"] = _score(test_ds, result.net)
    metrics_path = cfg["metrics_out"] or cfg["model_out"] + ".metrics.json"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(_dump_json(metrics))
    print(_dump_json(metrics), end="")
    return 0


def _score(dataset: Dataset, net) -> dict:
    preds = predict_indices(dataset.examples, net)
    names = dataset.labels.name
    pred_str = [[names(i) for i in seq] for seq in preds]
    gold_str = [[names(i) for i in ex.gold] for ex in dataset.examples]
    return metrics_report(pred_str, gold_str, scheme=dataset.labels.scheme)


def cmd_evaluate(args) -> int:
    store, model, net, vocab, labels, cfg = load_model(args.model)
    if args.metric == "span-f1" and labels.scheme != "bioes":
        offender = first_non_bioes(labels.labels)
        raise CliError(f"span-f1 needs BIOES labels; model labels include {offender!r}")
    dataset = _load_split(args.data, cfg, vocab, labels)
    preds = predict_indices(dataset.examples, net)
    pred_str = [[labels.name(i) for i in seq] for seq in preds]
    gold_str = [[labels.name(i) for i in ex.gold] for ex in dataset.examples]
    scheme = "bioes" if args.metric == "span-f1" else "plain"
    print(_dump_json(metrics_report(pred_str, gold_str, scheme=scheme)), end="")
    return 0


def cmd_predict(args) -> int:
    store, model, net, vocab, labels, cfg = load_model(args.model)
    try:
        sentences = read_conll_sentences(args.data, cfg["token_column"],
                                         cfg["token_column"])
    except OSError as e:
        raise CliError(f"cannot read input: {e}") from None
    except ValueError as e:
        raise CliError(str(e)) from None
    out = []
    for tokens, _ in sentences:
        indices = [vocab.lookup(t) for t in tokens]
        pred = discretize(infer(indices, net))
        out.append((tokens, [labels.name(i) for i in pred]))
    write_conll(args.out, out)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args.config, args.set or [])
    rows = run_gradcheck(seed=cfg["seed"])
    print(format_report(rows))
    failed = [row.name for row in rows if not row.ok]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 3
    return 0


def cmd_gen_synth(args) -> int:
    try:
        spec = make_hmm_spec(n_labels=args.n_labels, vocab_size=args.vocab_size,
                             t_min=args.t_min, t_max=args.t_max, seed=args.seed)
    except ValueError as e:
        raise CliError(str(e)) from None
    splits = synthetic_splits(spec, args.n_train, args.n_dev, args.n_test)
    for name, ds in zip(("train", "dev", "test"), splits):
        rows = [([ds.vocab.index_to_token[t] for t in ex.tokens],
                 [ds.labels.name(g) for g in ex.gold]) for ex in ds.examples]
        write_conll(f"{args.out}.{name}.conll", rows)
    return 0


def cmd_config_reference(args) -> int:
    width = max(len(k) for k in CONFIG_KEYS)
    for key, (_, default, help_text) in CONFIG_KEYS.items():
        shown = default if default != "" else "(empty)"
        print(f"{key:<{width}}  default: {shown:<12}  {help_text}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spenseq",
                                     description="Energy-based sequence labeling "
                                                 "with jointly trained inference nets.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("train", help="train a model and write its artifacts")
    with_config(p)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained model on a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", choices=("accuracy", "span-f1"), default="accuracy")
    p.set_defaults(run=cmd_evaluate)

    p = sub.add_parser("predict", help="write token<TAB>label predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    with_config(p)
    p.set_defaults(run=cmd_gradcheck)

    p = sub.add_parser("gen-synth", help="write a synthetic corpus as CoNLL files")
    p.add_argument("--out", required=True, help="path prefix for the three splits")
    p.add_argument("--n-labels", type=int, default=8)
    p.add_argument("--vocab-size", type=int, default=50)
    p.add_argument("--t-min", type=int, default=5)
    p.add_argument("--t-max", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-dev", type=int, default=500)
    p.add_argument("--n-test", type=int, default=500)
    p.set_defaults(run=cmd_gen_synth)

    p = sub.add_parser("config-reference", help="list every config key with its "
                                                "default and meaning")
    p.set_defaults(run=cmd_config_reference)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
