"""``moelab`` command line: data generation through theory verification.

Every subcommand writes a run manifest next to its outputs.  Options may come
from a JSON file given with ``--config`` (keys are option names with
underscores); flags on the command line win.  A manifest is itself a valid
``--config`` file and re-runs the recorded command.

Exit codes: 0 success, 2 usage error, 3 input or configuration error,
4 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InputError, MoelabError
from .model import ModelConfig, batch_loss, init_model, prune_experts
from .pipeline import (
    BenchmarkConfig,
    SuiteConfig,
    build_suite,
    collect_profiles,
    isolation_analysis,
    pretrain_base,
    run_selective_training,
)
from .reports import fmt, write_curves_csv, write_matrix_csv, write_pgm, write_regions_csv
from .routing import (
    RoutingProfile,
    collect_profile,
    default_boundaries,
    group_means,
    layerwise_similarity,
    load_profile,
    overlap_matrix,
    region_average,
    save_profile,
)
from .selection import (
    ProfileMatrix,
    SelectionConfig,
    load_selection_ids,
    proportional_ratios,
    save_selection,
    select_subnetwork,
)
from .synth import (
    Corpus,
    generate,
    is_high_resource,
    make_benchmark_suite,
    read_corpus,
    read_suite_manifest,
    write_corpus,
    write_suite_manifest,
)
from .theory import (
    IsolationReport,
    disjoint_scenario,
    estimate_lipschitz,
    hidden_samples,
    max_input_change,
    perturbation_check,
    support_set,
    verify_exact_invariance,
    verify_gradient_isolation,
)
from .training import TrainConfig, build_mask, pretrain, train

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_VERIFY = 0, 2, 3, 4


class VerificationFailed(Exception):
    pass


# --- option parsing -------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pair(text: str) -> list[int]:
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected L1,L2, got {text!r}") from None
    return [a, b]


# command -> {option: default}; None means "no default"
DEFAULTS: dict[str, dict] = {
    "gen": dict(high=None, low=None, out=None, vocab=64, overlap=0.0, low_budget=4096,
                seq_len=32, ngram_order=2, seed=0),
    "pretrain": dict(suite=None, out=None, seed=7, d_model=32, expert_hidden=32, layers=8,
                     experts=8, top_k=2, max_seq_len=64, epochs=1, batch_size=32, lr=3e-3,
                     optimizer="adam", train_seed=0),
    "collect": dict(model=None, corpus=None, language=None, suite=None, split="train", out=None),
    "analyze": dict(profiles=None, out=None, k=30, per_layer_topk=None, boundaries=None,
                    reference=None),
    "select": dict(profiles=None, target=None, k=16, ratios=None, boundaries=None, alpha=10.0,
                   out=None),
    "train": dict(model=None, selection=None, corpus=None, suite=None, language=None, out=None, epochs=3, batch_size=16,
                  lr=2e-5, optimizer="sgd", seed=0, max_steps=None),
    "prune": dict(model=None, selection=None, out=None),
    "verify": dict(mode=None, out=None, scenario="disjoint", model=None, selection=None,
                   corpus=None, suite=None, language=None, other=None, steps=50, lr=0.05, batch_size=16, seed=0, safety=2.0),
    "report": dict(out=None, seed=0, model_seed=7, budget=16, target="lr0"),
}
REQUIRED = {
    "gen": ["high", "low", "out"],
    "pretrain": ["suite", "out"],
    "collect": ["model", "out"],
    "analyze": ["profiles", "out"],
    "select": ["profiles", "target", "out"],
    "train": ["model", "selection", "out"],
    "prune": ["model", "selection", "out"],
    "verify": ["mode"],
    "report": ["out"],
}


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option values (flags override it)")
    common.add_argument("--exact", action="store_true", default=None,
                        help="fixed-order arithmetic, single thread")
    common.add_argument("--threads", type=int, help="worker threads for profile collection")

    parser = argparse.ArgumentParser(prog="moelab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"moelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        subs[name] = p
        return p

    p = add("gen", "generate a synthetic multi-language suite")
    p.add_argument("--high", type=int, help="number of high-resource languages")
    p.add_argument("--low", type=int, help="number of low-resource languages")
    p.add_argument("--out", help="output directory")
    p.add_argument("--vocab", type=int)
    p.add_argument("--overlap", type=float, help="fraction of each range shared with all others")
    p.add_argument("--low-budget", type=int, help="token budget of a low-resource language")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--ngram-order", type=int)
    p.add_argument("--seed", type=int)

    p = add("pretrain", "train a base model on the whole suite")
    p.add_argument("--suite", help="suite manifest written by gen")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="model initialization seed")
    for flag in ("--d-model", "--expert-hidden", "--layers", "--experts", "--top-k", "--max-seq-len",
                 "--epochs", "--batch-size", "--train-seed"):
        p.add_argument(flag, type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))

    p = add("collect", "record routing profiles")
    p.add_argument("--model", help="checkpoint")
    p.add_argument("--corpus", nargs="+", help="corpus files (one sequence per line)")
    p.add_argument("--language", nargs="+", help="labels for --corpus (default: file stems)")
    p.add_argument("--suite", help="suite manifest; profiles every language")
    p.add_argument("--split", choices=("train", "held-out"))
    p.add_argument("--out", help="output directory")

    p = add("analyze", "overlap matrix, similarity curves, region table")
    p.add_argument("--profiles", nargs="+")
    p.add_argument("--out", help="output directory")
    p.add_argument("--k", type=int, help="global top-K size")
    p.add_argument("--per-layer-topk", type=int)
    p.add_argument("--boundaries", type=_pair, help="L1,L2")
    p.add_argument("--reference", help="reference language (default: first profile)")

    p = add("select", "choose a language-specific expert subnetwork")
    p.add_argument("--profiles", nargs="+")
    p.add_argument("--target")
    p.add_argument("--k", type=int, help="total expert budget")
    p.add_argument("--ratios", type=_floats, help="shallow,middle,deep shares")
    p.add_argument("--boundaries", type=_pair, help="L1,L2")
    p.add_argument("--alpha", type=float)
    p.add_argument("--out", help="selection JSON file")

    p = add("train", "train only the selected experts")
    p.add_argument("--model")
    p.add_argument("--selection")
    p.add_argument("--corpus", help="target-language corpus")
    p.add_argument("--suite", help="suite manifest (alternative to --corpus)")
    p.add_argument("--language", help="target language within --suite")
    p.add_argument("--out", help="run directory")
    for flag in ("--epochs", "--batch-size", "--seed", "--max-steps"):
        p.add_argument(flag, type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))

    p = add("prune", "remove the selected experts from routing")
    p.add_argument("--model")
    p.add_argument("--selection")
    p.add_argument("--out", help="pruned checkpoint")

    p = add("verify", "check gradient isolation, exact invariance or the perturbation bound")
    p.add_argument("--mode", choices=("gradient", "invariance", "perturbation"))
    p.add_argument("--out", help="report JSON file")
    p.add_argument("--scenario", choices=("disjoint", "shared"),
                   help="constructed scenario used when --model is not given")
    p.add_argument("--model")
    p.add_argument("--selection")
    p.add_argument("--corpus", help="target-language corpus")
    p.add_argument("--suite", help="suite manifest (alternative to --corpus and --other)")
    p.add_argument("--language", help="target language within --suite")
    p.add_argument("--other", nargs="+", help="corpora evaluated for changes")
    for flag in ("--steps", "--batch-size", "--seed"):
        p.add_argument(flag, type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--safety", type=float, help="hidden-norm safety factor")

    p = add("report", "run the whole desk-scale benchmark and write its reports")
    p.add_argument("--out", help="output directory")
    for flag in ("--seed", "--model-seed", "--budget"):
        p.add_argument(flag, type=int)
    p.add_argument("--target")
    return parser, subs


def resolve(args: argparse.Namespace, subparser: argparse.ArgumentParser) -> dict:
    """Merge defaults, then the --config file, then explicit flags."""
    opts = dict(DEFAULTS[args.command])
    opts.update(exact=False, threads=1)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        doc = doc.get("config", doc)  # a run manifest works as a config file
        unknown = set(doc) - set(opts)
        if unknown:
            raise InputError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        opts.update(doc)
    for key, value in vars(args).items():
        if key in opts and value is not None:
            opts[key] = value
    missing = [k for k in REQUIRED[args.command] if opts.get(k) is None]
    if missing:
        subparser.error("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if opts["exact"]:
        opts["threads"] = 1
    if opts["threads"] < 1:
        subparser.error("--threads must be >= 1")
    return opts


# --- manifests --------------------------------------------------------------------------


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(path: Path, command: str, opts: dict, inputs, outputs, seeds: dict,
                   started: str, details: dict | None = None) -> None:
    config = {"command": command, **opts}
    outputs = [str(p) for p in outputs]
    missing = [p for p in outputs if not Path(p).exists()]
    if missing:
        raise RuntimeError(f"declared outputs missing: {missing}")
    doc = {
        "tool": "moelab",
        "version": __version__,
        "command": command,
        "config": {k: v for k, v in opts.items()},
        "config_hash": config_hash(config),
        "inputs": [str(p) for p in inputs],
        "outputs": outputs,
        "seeds": seeds,
        "details": details or {},
        "timestamps": {"started": started, "finished": _now()},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest_for_file(out: Path) -> Path:
    return out.with_name(out.stem + ".manifest.json")


def _write_loss_csv(path: Path, history) -> None:
    path.write_text("step,loss\n" + "".join(f"{i},{fmt(x)}\n" for i, x in enumerate(history)))


# --- subcommands -------------------------------------------------------------------------


def cmd_gen(o: dict) -> int:
    started = _now()
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    specs = make_benchmark_suite(o["high"], o["low"], o["vocab"], o["overlap"],
                                 low_budget=o["low_budget"], ngram_order=o["ngram_order"], seed=o["seed"])
    files, outputs = {}, []
    for spec in specs:
        train_c, held = generate(spec, spec.resource_level // o["seq_len"], o["seq_len"])
        # one file per language: training sequences first, then the held-out tail
        path = out / f"{spec.label}.txt"
        write_corpus(Corpus(spec.label, train_c.sequences + held.sequences), path)
        files[spec.label] = {"corpus": path.name, "n_train": len(train_c.sequences)}
        outputs.append(path)
    suite_path = out / "suite.json"
    write_suite_manifest(specs, files, suite_path)
    outputs.append(suite_path)
    write_manifest(out / "manifest.json", "gen", o, [], outputs, {"seed": o["seed"]}, started)
    print(f"wrote {len(specs)} languages to {out}")
    return EXIT_OK


def _suite_corpora(path: Path, split: str) -> tuple[dict, list]:
    try:
        entries = read_suite_manifest(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: unreadable suite manifest ({exc})") from exc
    corpora = {}
    for spec, files in entries:
        whole = read_corpus(path.parent / files["corpus"], spec.label)
        n = int(files["n_train"])
        part = whole.sequences[:n] if split == "train" else whole.sequences[n:]
        corpora[spec.label] = Corpus(spec.label, part, split)
    return corpora, entries


def _target_corpus(o: dict, split: str = "train") -> Corpus:
    if o["corpus"]:
        return read_corpus(o["corpus"])
    if o["suite"] and o["language"]:
        corpora, _ = _suite_corpora(Path(o["suite"]), split)
        if o["language"] not in corpora:
            raise InputError(f"language {o['language']!r} not in {sorted(corpora)}")
        return corpora[o["language"]]
    raise InputError("give --corpus, or --suite with --language")


def _other_corpora(o: dict) -> dict:
    if o["other"]:
        return {Path(p).stem: read_corpus(p) for p in o["other"]}
    if o["suite"]:
        return _suite_corpora(Path(o["suite"]), "held-out")[0]
    raise InputError("give --other corpora or --suite")


def cmd_pretrain(o: dict) -> int:
    started = _now()
    suite_path = Path(o["suite"])
    corpora, entries = _suite_corpora(suite_path, "train")
    vocab = entries[0][0].vocab_size or 1 + max(max(c.token_types()) for c in corpora.values())
    config = ModelConfig(vocab_size=vocab, d_model=o["d_model"], d_expert_hidden=o["expert_hidden"],
                         n_layers=o["layers"], n_experts=o["experts"], top_k=o["top_k"],
                         max_seq_len=o["max_seq_len"], seed=o["seed"])
    tc = TrainConfig(epochs=o["epochs"], batch_size=o["batch_size"], learning_rate=o["lr"],
                     seed=o["train_seed"], optimizer=o["optimizer"])
    mixed = [s for c in corpora.values() for s in c.sequences]
    model, history = pretrain(init_model(config), mixed, tc)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    _write_loss_csv(out / "loss.csv", history)
    write_manifest(out / "manifest.json", "pretrain", o, [suite_path], [out / "model.ckpt", out / "loss.csv"],
                   {"model": o["seed"], "train": o["train_seed"]}, started,
                   {"optimizer": o["optimizer"], "steps": len(history)})
    print(f"pre-trained {len(history)} steps, final batch loss {history[-1]:.4f}")
    return EXIT_OK


def _collect(model, sequences, label, threads: int, exact: bool) -> RoutingProfile:
    if threads <= 1 or len(sequences) < 2:
        return collect_profile(model, sequences, label, exact=exact)
    shards = [sequences[j::threads] for j in range(threads) if sequences[j::threads]]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda s: collect_profile(model, s, label), shards))
    total = parts[0]
    for p in parts[1:]:
        total = total + p  # integer counts: exact in any order
    return total


def cmd_collect(o: dict) -> int:
    started = _now()
    model = load_checkpoint(o["model"])
    inputs = [o["model"]]
    if o["suite"]:
        corpora, _ = _suite_corpora(Path(o["suite"]), o["split"])
        inputs.append(o["suite"])
    elif o["corpus"]:
        labels = o["language"] or [Path(p).name.split(".")[0] for p in o["corpus"]]
        if len(labels) != len(o["corpus"]):
            raise InputError("--language needs one label per --corpus file")
        corpora = {l: read_corpus(p, l) for l, p in zip(labels, o["corpus"])}
        inputs += o["corpus"]
    else:
        raise InputError("give --corpus files or --suite")
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for label, corpus in corpora.items():
        profile = _collect(model, list(corpus.sequences), label, o["threads"], o["exact"])
        path = out / f"{label}.profile.json"
        save_profile(profile, path)
        outputs.append(path)
    write_manifest(out / "manifest.json", "collect", o, inputs, outputs, {}, started)
    print(f"wrote {len(outputs)} profiles to {out}")
    return EXIT_OK


def cmd_analyze(o: dict) -> int:
    started = _now()
    profiles = [load_profile(p) for p in o["profiles"]]
    if len(profiles) < 2:
        raise InputError("analyze needs at least two profiles")
    n_layers = profiles[0].shape[0]
    boundaries = tuple(o["boundaries"]) if o["boundaries"] else default_boundaries(n_layers)
    labels = [p.language for p in profiles]
    reference = profiles[labels.index(o["reference"])] if o["reference"] else profiles[0]
    if o["reference"] and o["reference"] not in labels:
        raise InputError(f"reference {o['reference']!r} not among {labels}")
    matrix = overlap_matrix(profiles, o["k"])
    curves = [layerwise_similarity(p, reference, o["per_layer_topk"]) for p in profiles]
    regions = {c.language: region_average(c, boundaries) for c in curves}
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "overlap.csv", out / "overlap.pgm", out / "curves.csv", out / "regions.csv"]
    write_matrix_csv(paths[0], labels, matrix)
    write_pgm(paths[1], matrix)
    write_curves_csv(paths[2], curves)
    write_regions_csv(paths[3], regions)
    groups = ["high" if is_high_resource(l) else "low" for l in labels]
    within, cross = group_means(matrix, groups)
    details = {"within_group_mean": within, "cross_group_mean": cross, "boundaries": list(boundaries)}
    write_manifest(out / "manifest.json", "analyze", o, o["profiles"], paths, {}, started, details)
    print(f"within-group mean {fmt(within)}  cross-group mean {fmt(cross)}")
    return EXIT_OK


def cmd_select(o: dict) -> int:
    started = _now()
    profiles = [load_profile(p) for p in o["profiles"]]
    matrix = ProfileMatrix.from_profiles(profiles)
    boundaries = tuple(o["boundaries"]) if o["boundaries"] else default_boundaries(matrix.n_layers)
    ratios = tuple(o["ratios"]) if o["ratios"] else proportional_ratios(matrix.n_layers, boundaries)
    if len(ratios) != 3:
        raise InputError("--ratios needs three values")
    cfg = SelectionConfig(o["target"], o["k"], boundaries, ratios, o["alpha"])
    selection = select_subnetwork(matrix, cfg)
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_selection(selection, out)
    write_manifest(_manifest_for_file(out), "select", o, o["profiles"], [out], {}, started,
                   {"budgets": list(selection.budgets), "ratios": list(ratios), "boundaries": list(boundaries)})
    print(f"selected {len(selection.experts)} experts, budgets {selection.budgets}")
    return EXIT_OK


def cmd_train(o: dict) -> int:
    started = _now()
    model = load_checkpoint(o["model"])
    selected = load_selection_ids(o["selection"])
    corpus = _target_corpus(o)
    tc = TrainConfig(epochs=o["epochs"], batch_size=o["batch_size"], learning_rate=o["lr"], seed=o["seed"],
                     optimizer=o["optimizer"], max_steps=o["max_steps"])
    trained, history = train(model, corpus, build_mask(selected, model), tc)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "config.json", out / "initial.ckpt", out / "final.ckpt", out / "loss.csv"]
    paths[0].write_text(json.dumps(tc.to_json(), indent=2, sort_keys=True) + "\n")
    save_checkpoint(model, paths[1])
    save_checkpoint(trained, paths[2])
    _write_loss_csv(paths[3], history)
    inputs = [o["model"], o["selection"], o["corpus"] or o["suite"]]
    write_manifest(out / "manifest.json", "train", o, inputs, paths,
                   {"train": o["seed"]}, started, {"optimizer": o["optimizer"], "steps": len(history)})
    print(f"trained {len(selected)} experts for {len(history)} steps")
    return EXIT_OK


def cmd_prune(o: dict) -> int:
    started = _now()
    model = load_checkpoint(o["model"])
    selected = load_selection_ids(o["selection"])
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(prune_experts(model, selected), out)
    write_manifest(_manifest_for_file(out), "prune", o, [o["model"], o["selection"]], [out], {}, started)
    print(f"pruned {len(selected)} experts")
    return EXIT_OK


def _verify_invariance(o: dict, report: IsolationReport) -> bool:
    tc = TrainConfig(epochs=10_000, batch_size=o["batch_size"], learning_rate=o["lr"], seed=o["seed"],
                     optimizer="sgd", max_steps=o["steps"])
    if o["model"]:
        if not o["selection"]:
            raise InputError("invariance on a checkpoint needs --selection")
        before = load_checkpoint(o["model"])
        selected = load_selection_ids(o["selection"])
        target = _target_corpus(o)
        others = {k: v for k, v in _other_corpora(o).items() if k != o["language"]}
    else:
        scenario = disjoint_scenario(shared=o["scenario"] == "shared", seed=o["seed"])
        before = scenario.model
        target = scenario.target[0]
        selected = support_set(collect_profile(before, target))
        others = {"other": scenario.other[1]}
    after, _ = train(before, target, build_mask(selected, before), tc)
    report.selected = tuple(sorted(selected))
    ok = True
    for label, corpus in others.items():
        result = verify_exact_invariance(before, after, corpus, selected)
        report.invariance[label] = {
            "disjoint": result.disjoint,
            "shared_experts": [list(e) for e in result.shared_experts],
            "n_sequences": result.n_sequences,
            "n_differing": result.n_differing,
            "status": result.status,
        }
        report.status.append(result.status)
        print(result.status)
        ok &= result.passed or not result.disjoint  # skipped is not a failure
    return ok


def _verify_gradient(o: dict, report: IsolationReport) -> bool:
    if not o["model"]:
        raise InputError("gradient mode needs --model")
    model = load_checkpoint(o["model"])
    sequences = list(_target_corpus(o, "held-out").sequences)
    selected = load_selection_ids(o["selection"]) if o["selection"] else None
    ok, worst = True, np.zeros((model.config.n_layers, model.config.n_experts))
    n_batches = n_asserted = 0
    for start in range(0, len(sequences), o["batch_size"]):
        result = verify_gradient_isolation(model, sequences[start : start + o["batch_size"]], selected)
        worst = np.maximum(worst, result.max_abs)
        n_batches += 1
        n_asserted += result.n_asserted
        ok &= result.passed
    report.gradient_max_abs = worst.tolist()
    status = f"gradient-isolation: {'PASS' if ok else 'FAIL'} ({n_batches} batches, {n_asserted} zero checks)"
    report.status.append(status)
    print(status)
    return ok


def _verify_perturbation(o: dict, report: IsolationReport) -> bool:
    if not (o["model"] and o["selection"]):
        raise InputError("perturbation mode needs --model and --selection")
    before = load_checkpoint(o["model"])
    selected = load_selection_ids(o["selection"])
    target = _target_corpus(o)
    corpora = _other_corpora(o)
    tc = TrainConfig(epochs=10_000, batch_size=o["batch_size"], learning_rate=o["lr"], seed=o["seed"],
                     optimizer="sgd", max_steps=o["steps"])
    after, _ = train(before, target, build_mask(selected, before), tc)
    lip = estimate_lipschitz(before, hidden_samples(before, list(corpora.values())), safety=o["safety"],
                             radius=max_input_change(before, after, selected))
    results = perturbation_check(before, after, selected, corpora, lip)
    report.selected = tuple(sorted(selected))
    report.lipschitz = lip.to_json()
    report.perturbation = {k: r.to_json() for k, r in results.items()}
    report.overlap_mass = {k: r.overlap_mass for k, r in results.items()}
    report.loss_change = {k: batch_loss(after, c.sequences) - batch_loss(before, c.sequences)
                          for k, c in corpora.items()}
    ok = True
    for label, r in results.items():
        valid = r.routing_stable and r.within_hidden_bound
        verdict = "PASS" if r.holds and valid else ("ASSUMPTION VIOLATED" if not valid else "FAIL")
        line = f"perturbation {label}: measured {r.measured:.6e} bound {r.bound:.6e} {verdict}"
        report.status.append(line)
        print(line)
        # a violated assumption leaves the certificate silent; only a checked miss fails
        ok &= r.holds or not valid
    return ok


def cmd_verify(o: dict) -> int:
    started = _now()
    report = IsolationReport(optimizer="sgd", selected=())
    ok = {"invariance": _verify_invariance, "gradient": _verify_gradient,
          "perturbation": _verify_perturbation}[o["mode"]](o, report)
    if o["out"]:
        out = Path(o["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_json(), indent=2) + "\n")
        inputs = [p for p in (o["model"], o["selection"], o["corpus"], o["suite"]) if p] + list(o["other"] or [])
        write_manifest(_manifest_for_file(out), "verify", o, inputs, [out], {"seed": o["seed"]}, started,
                       {"passed": ok})
    if not ok:
        raise VerificationFailed(o["mode"])
    return EXIT_OK


def cmd_report(o: dict) -> int:
    started = _now()
    cfg = BenchmarkConfig(suite=SuiteConfig(seed=o["seed"]), model=ModelConfig(seed=o["model_seed"]),
                          budget=o["budget"], target=o["target"])
    suite = build_suite(cfg.suite, cfg.model.vocab_size)
    base, _ = pretrain_base(cfg, suite)
    profiles = collect_profiles(base, suite.train)
    analysis = isolation_analysis(profiles, suite.groups())
    outcome = run_selective_training(cfg, base, suite, profiles)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / n for n in ("overlap.csv", "overlap.pgm", "curves.csv", "regions.csv", "selection.json",
                               "adaptation.csv", "summary.json")]
    write_matrix_csv(paths[0], analysis.labels, analysis.overlap)
    write_pgm(paths[1], analysis.overlap)
    write_curves_csv(paths[2], analysis.curves.values())
    write_regions_csv(paths[3], analysis.regions)
    save_selection(outcome.selection, paths[4])
    tc, pc = outcome.train_change, outcome.prune_change
    rows = ["language,base,trained,pruned,trained_change,pruned_change,overlap_mass"]
    for l in suite.labels:
        rows.append(",".join([l, fmt(outcome.base_loss[l]), fmt(outcome.trained_loss[l]),
                              fmt(outcome.pruned_loss[l]), fmt(tc[l]), fmt(pc[l]), fmt(outcome.overlap_mass[l])]))
    paths[5].write_text("\n".join(rows) + "\n")
    summary = {
        "within_group_mean": analysis.within,
        "cross_group_mean": analysis.cross,
        "regions": {k: list(v) for k, v in analysis.regions.items()},
        "train_change": tc,
        "prune_change": pc,
        "budgets": list(outcome.selection.budgets),
    }
    paths[6].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out / "manifest.json", "report", o, [], paths,
                   {"suite": o["seed"], "model": o["model_seed"]}, started)
    print(f"within {fmt(analysis.within)} cross {fmt(analysis.cross)}; "
          f"target change {fmt(tc[cfg.target])}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "collect": cmd_collect,
    "analyze": cmd_analyze,
    "select": cmd_select,
    "train": cmd_train,
    "prune": cmd_prune,
    "verify": cmd_verify,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        opts = resolve(args, subs[args.command])
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except MoelabError as exc:
        print(f"moelab: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](opts)
    except VerificationFailed as exc:
        print(f"moelab: verification failed ({exc})", file=sys.stderr)
        return EXIT_VERIFY
    except (MoelabError, OSError) as exc:
        print(f"moelab: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
