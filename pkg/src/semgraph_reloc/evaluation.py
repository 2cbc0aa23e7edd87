"""F1 / precision-recall metrics and table-shaped experiment reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from semgraph_reloc.errors import DegenerateInputError


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    pr_points: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(s) != len(y):
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    if len(s) == 0:
        raise DegenerateInputError("no scores to evaluate")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def f1_score(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Counts a score ``>= threshold`` as a predicted match."""
    s, y = _as_arrays(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    p, r, f = _prf(tp, fp, fn)
    return MetricsReport(p, r, f, threshold, tp, fp, tn, fn)


def pr_curve(scores, labels) -> list[tuple[float, float, float]]:
    """``(precision, recall, threshold)`` at every unique score, ascending threshold."""
    s, y = _as_arrays(scores, labels)
    if y.all() or not y.any():
        raise DegenerateInputError("precision-recall needs both positive and negative labels")
    order = np.argsort(-s, kind="stable")
    s_desc, y_desc = s[order], y[order]
    tp_cum = np.cumsum(y_desc)
    fp_cum = np.cumsum(~y_desc)
    # last index of each run of equal scores = predictions at that threshold
    last = np.r_[np.nonzero(np.diff(s_desc))[0], len(s_desc) - 1]
    n_pos = int(y.sum())
    points = []
    for i in last[::-1]:
        tp, fp = int(tp_cum[i]), int(fp_cum[i])
        p, r, _ = _prf(tp, fp, n_pos - tp)
        points.append((p, r, float(s_desc[i])))
    return points


# ---------------------------------------------------------------------------
# experiment reports

REFERENCE_SEQUENCES = ("00", "02", "05", "06", "07", "08")
# published KITTI F1 per sequence then mean; static, never recomputed
REFERENCE_ROWS = (
    ("M2DP", (0.836, 0.781, 0.772, 0.896, 0.861, 0.169, 0.719)),
    ("ScanContext", (0.937, 0.858, 0.955, 0.998, 0.922, 0.811, 0.914)),
    ("PointNetVLAD", (0.785, 0.710, 0.775, 0.903, 0.448, 0.142, 0.627)),
    ("CMSG", (0.836, 0.774, 0.825, 0.770, 0.863, 0.826, 0.816)),
)
ABLATION_ROWS = (
    ("(a)", "base", 0.759),
    ("(b)", "base+semantic", 0.782),
    ("(c)", "full", 0.836),
)


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.3f}"


@dataclass
class ExperimentResult:
    """Per-ablation, per-sequence reports plus pooled held-out scores."""

    per_sequence: dict  # ablation -> {sequence -> [MetricsReport per seed]}
    scores: dict  # ablation -> list of (pair, score) over every fold and seed
    mode: str  # "leave-one-out" or "checkpoint"
    seeds: tuple

    def sequences(self) -> list:
        return sorted({s for rows in self.per_sequence.values() for s in rows})

    def f1(self, ablation: str, seq: str) -> float:
        reps = self.per_sequence[ablation][seq]
        return float(np.mean([r.f1 for r in reps]))

    def mean_f1(self, ablation: str) -> float:
        return float(np.mean([self.f1(ablation, s) for s in self.per_sequence[ablation]]))


def _group_by_sequence(pairs) -> dict:
    out = {}
    for p in pairs:
        out.setdefault(p.cloud_scene[0], []).append(p)
    return out


def run_experiment(config, pairs, source, ablations=None, seeds=None, checkpoint=None,
                   train_enabled: bool = True, progress=None) -> ExperimentResult:
    """Leave-one-sequence-out F1 for each ablation.

    With ``checkpoint`` the stored model is scored on every sequence instead
    of retraining per fold.  F1 is micro-averaged over the pairs of a sequence.
    """
    from dataclasses import replace

    from semgraph_reloc.errors import ConfigError
    from semgraph_reloc.ingest import leave_one_out_splits
    from semgraph_reloc.model import apply_ablation
    from semgraph_reloc.training import PairFeatures, load_checkpoint, predict, train

    ablations = tuple(ablations or (config.train.ablation,))
    seeds = tuple(seeds if seeds is not None else (config.train.rng_seed,))
    by_seq = _group_by_sequence(pairs)
    if checkpoint is None and not train_enabled:
        raise ConfigError("no checkpoint given and training is disabled")
    if checkpoint is not None:
        from pathlib import Path

        if not Path(checkpoint).is_file():
            raise ConfigError(f"checkpoint {checkpoint} does not exist")

    per_sequence = {a: {} for a in ablations}
    scores = {a: [] for a in ablations}
    features = PairFeatures(source, config)
    if checkpoint is not None:
        model = load_checkpoint(checkpoint, config.model)
        for ablation in ablations:
            mask = apply_ablation(ablation)
            for seq in sorted(by_seq):
                test = by_seq[seq]
                s = predict(model, features, test, mask)
                per_sequence[ablation][seq] = [_report(s, test, ablation, seq, None)]
                scores[ablation] += list(zip(test, s.tolist()))
        return ExperimentResult(per_sequence, scores, "checkpoint", (None,))

    for ablation in ablations:
        for seed in seeds:
            run_cfg = replace(config, train=replace(config.train, ablation=ablation, rng_seed=seed))
            mask = apply_ablation(ablation)
            for train_seqs, test_seq in leave_one_out_splits(sorted(by_seq)):
                train_pairs = [p for s in train_seqs for p in by_seq[s]]
                model, _ = train(train_pairs, source, run_cfg, features=features)
                test = by_seq[test_seq]
                s = predict(model, features, test, mask)
                rep = _report(s, test, ablation, test_seq, seed)
                per_sequence[ablation].setdefault(test_seq, []).append(rep)
                scores[ablation] += list(zip(test, s.tolist()))
                if progress is not None:
                    progress(rep)
    return ExperimentResult(per_sequence, scores, "leave-one-out", seeds)


def _report(scores, pairs, ablation, split, seed) -> MetricsReport:
    labels = [p.label for p in pairs]
    rep = f1_score(scores, labels)
    try:
        rep.pr_points = pr_curve(scores, labels)
    except DegenerateInputError:
        rep.pr_points = []
    rep.metadata = {"ablation": ablation, "split": split, "seed": seed}
    return rep


def f1_table(result: ExperimentResult, label: str = "this run") -> str:
    """Sequence-by-method F1 table: reference rows first, then one row per ablation."""
    seqs = sorted(set(REFERENCE_SEQUENCES) | set(result.sequences()))
    lines = [
        f"# F1 at threshold 0.5, micro-averaged within each sequence; mode {result.mode}; "
        f"seeds {','.join(str(s) for s in result.seeds)}",
        "# reference rows are published KITTI odometry results, shown for comparison only",
        "\t".join(["method", *seqs, "Mean"]),
    ]
    for name, vals in REFERENCE_ROWS:
        ref = dict(zip(REFERENCE_SEQUENCES, vals))
        lines.append("\t".join([f"{name} (reference)", *(_fmt(ref.get(s)) for s in seqs), _fmt(vals[-1])]))
    for ablation in result.per_sequence:
        have = result.per_sequence[ablation]
        cells = [_fmt(result.f1(ablation, s)) if s in have else "-" for s in seqs]
        lines.append("\t".join([f"{label} ({ablation})", *cells, _fmt(result.mean_f1(ablation))]))
    return "\n".join(lines) + "\n"


def ablation_table(result: ExperimentResult) -> str:
    lines = [
        "# mean F1 over sequences and seeds; reference column holds published KITTI values",
        "row\tsemantic\tgraph\tF1\treference_F1",
    ]
    from semgraph_reloc.model import apply_ablation

    for row, ablation, ref in ABLATION_ROWS:
        m = apply_ablation(ablation)
        f1 = result.mean_f1(ablation) if ablation in result.per_sequence else None
        lines.append("\t".join([row, "w" if m.semantic else "w/o", "w" if m.graph else "w/o",
                                _fmt(f1), _fmt(ref)]))
    return "\n".join(lines) + "\n"


def sequence_rows(result: ExperimentResult) -> str:
    lines = ["ablation\tsequence\tseed\ttp\tfp\ttn\tfn\tprecision\trecall\tf1"]
    for ablation, rows in result.per_sequence.items():
        for seq in sorted(rows):
            for r in rows[seq]:
                lines.append("\t".join([ablation, seq, str(r.metadata["seed"]), str(r.tp), str(r.fp),
                                        str(r.tn), str(r.fn), f"{r.precision:.6f}",
                                        f"{r.recall:.6f}", f"{r.f1:.6f}"]))
    return "\n".join(lines) + "\n"


def pooled_pr(result: ExperimentResult, ablation: str):
    pairs_scores = result.scores[ablation]
    return pr_curve([s for _, s in pairs_scores], [p.label for p, _ in pairs_scores])


def pr_text(points) -> str:
    return "precision\trecall\tthreshold\n" + "".join(
        f"{p:.6f}\t{r:.6f}\t{t:.6f}\n" for p, r, t in points)


def scores_text(pairs_scores) -> str:
    lines = ["image_seq\timage_frame\tcloud_seq\tcloud_frame\tlabel\tscore"]
    for p, s in pairs_scores:
        lines.append(f"{p.image_scene[0]}\t{p.image_scene[1]}\t{p.cloud_scene[0]}\t{p.cloud_scene[1]}"
                     f"\t{p.label}\t{s:.6f}")
    return "\n".join(lines) + "\n"


def write_reports(result: ExperimentResult, out_dir, ablation_report: bool = False,
                  plots: bool = True) -> list:
    """Write every table and curve file into ``out_dir``; returns the paths written."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        path = out / name
        path.write_text(text)
        written.append(path)

    put("f1_table.tsv", f1_table(result))
    put("sequences.tsv", sequence_rows(result))
    if ablation_report:
        put("ablation_table.tsv", ablation_table(result))
    curves = {}
    for ablation in result.per_sequence:
        tag = ablation.replace("+", "_")
        put(f"scores_{tag}.tsv", scores_text(result.scores[ablation]))
        try:
            curves[ablation] = pooled_pr(result, ablation)
        except DegenerateInputError:
            continue
        put(f"pr_{tag}.tsv", pr_text(curves[ablation]))
    if plots and curves:
        from semgraph_reloc.plotting import plot_pr_curves

        written.append(plot_pr_curves(curves, out / "pr_curves.png"))
    return written
