"""Experiment runs: training with evaluation, sweeps, bandit simulation, plot data.

Every function here writes plain CSV/YAML/JSON artifacts into a run
directory and returns a small summary dict. Outputs are pure functions of
the resolved config and the corpus, so repeated runs are byte-identical.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np

from . import align_metrics as am
from . import layer_scheduler as sched
from . import synth_corpus
from .bias_compensation import BiasTable, estimate_bias
from .config import ExperimentConfig, with_value
from .projector_net import (
    LossBreakdown,
    ProjectorParams,
    SolverSettings,
    forward,
    init_params,
    save_checkpoint,
    total_loss,
    train_step,
)
from .sequences import TokenSequence
from .synth_corpus import Corpus

log = logging.getLogger(__name__)

RUN_ARTIFACTS = (
    "config.yaml",
    "checkpoint.json",
    "trace.csv",
    "metrics_before.csv",
    "metrics.csv",
    "reps_before.csv",
    "reps_after.csv",
)


def fit_biases(corpus: Corpus) -> BiasTable:
    """Biases from the train split; holdout languages use their own unlabeled test utterances."""
    table = []
    for lang in corpus.train_languages:
        table.append(estimate_bias(corpus.utterances_in("train", [lang]), lang))
    for lang in corpus.holdout_languages:
        utts = corpus.utterances_in("test", [lang])
        if utts:
            table.append(estimate_bias(utts, lang))
    return BiasTable(table)


def prepared_utterances(corpus: Corpus, biases: BiasTable | None) -> dict[tuple[int, str], TokenSequence]:
    if biases is None:
        return dict(corpus.utterances)
    return {key: biases.apply(seq) for key, seq in corpus.utterances.items()}


def encode(
    params: ProjectorParams,
    utterances: dict[tuple[int, str], TokenSequence],
    corpus: Corpus,
    layer: int | str = "top",
    split: str = "test",
) -> dict[str, tuple[list[int], np.ndarray]]:
    """Pooled layer outputs of every ``split`` utterance, grouped by language.

    ``layer`` is 1-based, ``"top"`` for the last layer, or 0 for the
    projector input.
    """
    ids = corpus.item_ids(split)
    out: dict[str, tuple[list[int], np.ndarray]] = {}
    for lang in corpus.language_ids:
        sids = [s for s in ids if (s, lang) in utterances]
        if not sids:
            continue
        vecs = []
        for s in sids:
            seq = utterances[(s, lang)]
            if layer == 0:
                vecs.append(seq.valid.mean(axis=0))
            else:
                tr = forward(params, seq)
                vecs.append(tr.pooled_top if layer == "top" else tr.pooled(int(layer)))
        out[lang] = (sids, np.stack(vecs))
    return out


def write_reps(path: Path, reps: dict[str, tuple[list[int], np.ndarray]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = next(iter(reps.values()))[1].shape[1]
        w.writerow(["language_id", "semantic_id"] + [f"x{i}" for i in range(dim)])
        for lang, (ids, x) in reps.items():
            for sid, vec in zip(ids, x):
                w.writerow([lang, sid] + [repr(float(v)) for v in vec])


def read_reps(path: Path) -> dict[str, tuple[list[int], np.ndarray]]:
    groups: dict[str, tuple[list[int], list[np.ndarray]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            ids, vecs = groups.setdefault(row[0], ([], []))
            ids.append(int(row[1]))
            vecs.append(np.array([float(v) for v in row[2:]]))
    return {lang: (ids, np.stack(vecs)) for lang, (ids, vecs) in groups.items()}


def _fmt_layers(ot: dict[int, float]) -> str:
    return ";".join(f"{l}:{v!r}" for l, v in sorted(ot.items()))


def _eval_report(config: ExperimentConfig, reps, reference=None) -> am.MetricsReport:
    ev = config.evaluation
    return am.evaluate(reps, ev.codebook_size, config.seed, ev.kmeans_iter, ev.smoothing, reference)


def train_pairs(report: am.MetricsReport, corpus: Corpus) -> list[tuple[str, str]]:
    train = set(corpus.train_languages)
    return [p for p in report.pairs() if p[0] in train and p[1] in train]


def holdout_recall(report: am.MetricsReport, corpus: Corpus) -> float:
    """Mean R@1 between each holdout language and each training language, both directions."""
    vals = [
        report.recall_at_1[(h, t)] for h in corpus.holdout_languages for t in corpus.train_languages
    ] + [report.recall_at_1[(t, h)] for h in corpus.holdout_languages for t in corpus.train_languages]
    return float(np.mean(vals)) if vals else float("nan")


def run_train(config: ExperimentConfig, corpus: Corpus, out_dir: str | Path | None = None) -> dict[str, Any]:
    """Train a projector on ``corpus`` and evaluate it before and after.

    Raises:
        NumericalFailure: the loss became non-finite; ``step`` names the step.
    """
    tc, sc = config.training, config.scheduler
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(config.to_yaml())
    if tc.pairing != "random_pairwise" and tc.anchor_language not in corpus.train_languages:
        raise ValueError(f"anchor language {tc.anchor_language!r} is not a training language of the corpus")
    if tc.lower_layers is None and tc.layer_strategy == "ucb_lower" and tc.num_layers // 2 < 1:
        raise ValueError("no lower layers to schedule")

    biases = fit_biases(corpus) if tc.bias_compensation else None
    utts = prepared_utterances(corpus, biases)
    sub = Corpus(corpus.languages, corpus.items, utts, corpus.seed, corpus.dim, corpus.latent_dim)

    params = init_params(corpus.dim, tc.num_layers, corpus.num_classes, config.seed, tc.init_scale)
    candidates = tc.candidate_layers()
    scheduler = None
    if tc.layer_strategy in ("ucb_all", "ucb_lower"):
        scheduler = sched.init_state(candidates, sc.rho, sc.beta, sc.tau, config.seed, sc.normalize_reward)
    solver = SolverSettings(tc.epsilon, tc.sinkhorn_max_iter, tc.sinkhorn_tol)
    eval_layer = config.evaluation.eval_layer

    reps_before = encode(params, utts, corpus, eval_layer)
    report_before = _eval_report(config, reps_before)

    batches = synth_corpus.make_batches(sub, tc.batch_size, config.seed, tc.pairing, tc.anchor_language)
    probe = next(synth_corpus.make_batches(sub, tc.batch_size, config.seed, tc.pairing, tc.anchor_language))
    probe_layers = candidates if tc.alpha > 0 else []

    def probe_loss(p: ProjectorParams) -> float:
        parts = [total_loss(p, pair, probe_layers, tc.alpha, tc.epsilon, flow, tc.sinkhorn_max_iter, tc.sinkhorn_tol)
                 for pair, flow in probe]
        return LossBreakdown.mean(parts).total

    initial_loss = probe_loss(params)
    trace_rows = []
    for step in range(tc.steps):
        batch = next(batches)
        res = train_step(
            params,
            batch,
            scheduler,
            lr=tc.lr,
            alpha=tc.alpha,
            solver=solver,
            layer_strategy=tc.layer_strategy,
            candidates=candidates,
            step=step,
            seed=config.seed,
            reward_source=sc.reward_source,
        )
        params, scheduler = res.params, res.scheduler
        trace_rows.append(
            [
                step,
                repr(res.losses.ce),
                _fmt_layers(res.losses.ot_by_layer),
                repr(res.losses.total),
                ";".join(str(l) for l in res.layers),
                "" if res.reward is None else repr(res.reward),
            ]
        )
    final_loss = probe_loss(params)

    reps_after = encode(params, utts, corpus, eval_layer)
    report_after = _eval_report(config, reps_after, reference=reps_before)
    report_before.centroid_reference = dict(report_before.centroid_distance)
    pairs = train_pairs(report_after, corpus)
    summary = {
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "r_at_1_before": report_before.mean_recall(pairs),
        "r_at_1_after": report_after.mean_recall(pairs),
        "one_minus_jsd_before": report_before.mean_one_minus_jsd(pairs),
        "one_minus_jsd_after": report_after.mean_one_minus_jsd(pairs),
        "holdout_r_at_1_before": holdout_recall(report_before, corpus),
        "holdout_r_at_1_after": holdout_recall(report_after, corpus),
    }
    if scheduler is not None:
        summary["layer_counts"] = dict(zip(scheduler.layer_ids, scheduler.counts))

    if out is not None:
        save_checkpoint(out / "checkpoint.json", params, scheduler, tc.steps)
        with open(out / "trace.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "ce", "ot_per_layer", "total", "selected_layer", "reward"])
            w.writerows(trace_rows)
        report_before.write_csv(out / "metrics_before.csv")
        report_after.write_csv(out / "metrics.csv")
        write_reps(out / "reps_before.csv", reps_before)
        write_reps(out / "reps_after.csv", reps_after)
        if biases is not None:
            biases.save(out / "bias.tsv")
        with open(out / "run_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["key", "value"])
            for key, value in summary.items():
                w.writerow([key, repr(value) if isinstance(value, float) else value])
    return {
        "summary": summary,
        "report_before": report_before,
        "report_after": report_after,
        "params": params,
        "scheduler": scheduler,
        "reps_before": reps_before,
        "reps_after": reps_after,
        "trace": trace_rows,
    }


SWEEP_HEADER = ["axis", "value", "r_at_1_avg", "one_minus_jsd_avg", "holdout_r_at_1", "final_loss"]


def run_sweep(
    config: ExperimentConfig,
    corpus: Corpus,
    axis: str,
    values: Sequence[Any],
    out_dir: str | Path | None = None,
) -> list[list[Any]]:
    """One training run per ``axis`` value on a shared corpus and seed."""
    configs = [with_value(config, axis, v) for v in values]
    rows = []
    for value, cfg in zip(values, configs):
        sub = None if out_dir is None else Path(out_dir) / f"{axis.replace('.', '_')}={value}"
        s = run_train(cfg, corpus, sub)["summary"]
        rows.append(
            [axis, value, repr(s["r_at_1_after"]), repr(s["one_minus_jsd_after"]),
             repr(s["holdout_r_at_1_after"]), repr(s["final_loss"])]
        )
    if out_dir is not None:
        with open(Path(out_dir) / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_HEADER)
            w.writerows(rows)
    return rows


def run_bandit_sim(config: ExperimentConfig, out_dir: str | Path | None = None) -> dict[str, Any]:
    """Drive the scheduler with stationary synthetic rewards, one run per seed.

    Arm ``i`` pays Bernoulli(mean_i) (or gaussian around mean_i); the reward
    fed to the scheduler is the payout itself.
    """
    bc, sc = config.bandit, config.scheduler
    if bc.steps < 1:
        raise ValueError("steps must be >= 1")
    means = np.asarray(bc.arm_means, dtype=float)
    arms = list(range(1, len(means) + 1))
    best = int(np.argmax(means))
    freq_rows, window_best = [], []
    traces = []
    for s in range(bc.n_seeds):
        seed = config.seed + s
        state = sched.init_state(arms, sc.rho, sc.beta, sc.tau, seed)
        trace = sched.BanditTrace(tuple(arms))
        payout_rng = np.random.default_rng([seed, 7])
        counts = np.zeros(len(arms), dtype=int)
        window = np.zeros(len(arms), dtype=int)
        for t in range(1, bc.steps + 1):
            p = sched.sample_distribution(state)
            layer = sched.select(state)
            i = layer - 1
            if bc.reward_kind == "bernoulli":
                r = float(payout_rng.random() < means[i])
            else:
                r = float(means[i] + bc.reward_sigma * payout_rng.standard_normal())
            state = sched.update(state, layer, r)
            trace.record(t, layer, r, state, p)
            counts[i] += 1
            if t >= bc.window_start:
                window[i] += 1
        traces.append(trace)
        freq = counts / counts.sum()
        wfreq = window / max(1, window.sum())
        window_best.append(float(wfreq[best]))
        freq_rows.append([seed] + [repr(float(x)) for x in freq] + [repr(float(wfreq[best]))] + [repr(q) for q in state.q])
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            trace.write_csv(Path(out_dir) / f"bandit_trace_seed{seed}.csv")
    if out_dir is not None:
        with open(Path(out_dir) / "bandit_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed"] + [f"freq_{a}" for a in arms] + ["window_best_freq"] + [f"final_q_{a}" for a in arms])
            w.writerows(freq_rows)
    overall = np.mean([[float(x) for x in row[1 : 1 + len(arms)]] for row in freq_rows], axis=0)
    return {
        "mean_frequencies": overall.tolist(),
        "window_best_frequency": float(np.mean(window_best)),
        "best_arm": arms[best],
        "traces": traces,
    }


def run_plot_data(run_dir: str | Path) -> dict[str, Path]:
    """Emit projection and metric-scatter CSVs from a finished training run."""
    rd = Path(run_dir)
    missing = [name for name in RUN_ARTIFACTS if not (rd / name).exists()]
    if missing:
        raise FileNotFoundError(f"incomplete run directory {rd}: missing {', '.join(missing)}")
    paths = {}
    for tag in ("before", "after"):
        reps = read_reps(rd / f"reps_{tag}.csv")
        tagged = [(vec, lang, sid) for lang, (ids, x) in reps.items() for sid, vec in zip(ids, x)]
        path = rd / f"proj_{tag}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "language_id", "semantic_id"])
            for x, y, lang, sid in am.project_2d(tagged):
                w.writerow([repr(x), repr(y), lang, sid])
        paths[f"proj_{tag}"] = path
    before = am.MetricsReport.read_csv(rd / "metrics_before.csv")
    after = am.MetricsReport.read_csv(rd / "metrics.csv")
    scatter = rd / "scatter.csv"
    with open(scatter, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "baseline_r_at_1", "baseline_one_minus_jsd", "aligned_r_at_1", "aligned_one_minus_jsd"])
        for pair in before.pairs():
            w.writerow(
                [f"{pair[0]}-{pair[1]}", repr(before.pair_recall(pair)), repr(before.one_minus_jsd_norm(pair)),
                 repr(after.pair_recall(pair)), repr(after.one_minus_jsd_norm(pair))]
            )
    paths["scatter"] = scatter
    summary = rd / "summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "mean_r_at_1", "mean_one_minus_jsd", "cluster_separation"])
        for tag, rep in (("before", before), ("after", after)):
            sep = am.cluster_separation(read_reps(rd / f"reps_{tag}.csv"))
            w.writerow([tag, repr(rep.mean_recall()), repr(rep.mean_one_minus_jsd()), repr(sep)])
    paths["summary"] = summary
    return paths
