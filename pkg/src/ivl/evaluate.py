"""Iterative inference loops and evaluation metrics.

Inference feeds the memory back until the end token is predicted (or a step
cap is hit); metrics cover normalised edit distance, multiset
precision/recall/F, and exact-count accuracy.
"""

from __future__ import annotations

from collections import Counter as Multiset
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .memory import SpatialMemory, render_peaks, update_memory


# -- metrics -------------------------------------------------------------------------

def edit_distance(a, b):
    """Levenshtein distance between two token sequences (two-row DP)."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def edit_distance_normalised(pred, truth):
    """Levenshtein distance normalised by the ground-truth length (may exceed 1)."""
    truth = list(truth)
    if not truth:
        raise ValueError("ground-truth sequence must be nonempty")
    return edit_distance(pred, truth) / len(truth)


def prf_metrics(pred, truth):
    """Multiset precision / recall / F over token collections.

    Empty prediction yields precision 0 by definition.
    """
    pred_ms, truth_ms = Multiset(pred), Multiset(truth)
    inter = sum((pred_ms & truth_ms).values())
    p = inter / sum(pred_ms.values()) if pred_ms else 0.0
    r = inter / sum(truth_ms.values()) if truth_ms else 0.0
    f = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    return p, r, f


def count_accuracy(preds, truths):
    """Fraction of predictions matching the ground-truth count exactly."""
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(truths)} truths")
    if not truths:
        return 0.0
    return float(np.mean([int(p == t) for p, t in zip(preds, truths)]))


# -- block-parser inference ---------------------------------------------------------------

@dataclass
class BlockInferResult:
    lines: list                   # per image: list of lines (token lists)
    memory_trace: list            # per outer step: (N,1,H,W) memory after update
    delta_trace: list             # per outer step: predicted updates
    s_alpha_trace: list
    steps: np.ndarray             # (N,) outer steps consumed (incl. end-of-block step)
    truncated: np.ndarray         # (N,) step cap hit


def infer_block(model, images, max_steps=16, max_chars=20) -> BlockInferResult:
    """Iterate the block parser until end-of-block on a batch of images.

    Predicted updates are clamped nonnegative before entering the memory so
    the trace stays monotone.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    n, _, h, w = images.shape
    mem = SpatialMemory.zeros(n, h, w)
    done = np.zeros(n, dtype=bool)
    lines = [[] for _ in range(n)]
    steps = np.zeros(n, dtype=np.int64)
    mem_trace, delta_trace, salpha_trace = [], [], []
    with T.no_grad():
        for _ in range(max_steps):
            if done.all():
                break
            res = model.step(images, mem, max_chars=max_chars)
            n_steps = res.tokens.shape[1]
            newly_done = done.copy()
            for i in range(n):
                if done[i]:
                    continue
                steps[i] += 1
                seq = [int(res.tokens[i, t]) for t in range(n_steps) if res.active[i, t]]
                if seq and seq[0] == model.eob:
                    newly_done[i] = True
                    continue
                lines[i].append([t for t in seq if t < model.vocab_size])
            delta = np.maximum(res.delta_m.data, 0.0)
            delta[newly_done] = 0.0
            mem = update_memory(mem, delta)
            done = newly_done
            mem_trace.append(mem.map.copy())
            delta_trace.append(delta.copy())
            salpha_trace.append(res.s_alpha.data.copy())
    return BlockInferResult(lines=lines, memory_trace=mem_trace, delta_trace=delta_trace,
                            s_alpha_trace=salpha_trace, steps=steps, truncated=~done)


@dataclass
class CountInferResult:
    counts: np.ndarray
    p_stop_trace: list      # per step, (N,)
    memory_trace: list
    delta_trace: list
    truncated: np.ndarray


def infer_count(model, images, max_steps=24, sigma=2.0) -> CountInferResult:
    """Iterate the counter; localisation at inference picks the argmax of the
    predicted update and renders a single peak there."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    n, _, h, w = images.shape
    mem = SpatialMemory.zeros(n, h, w)
    done = np.zeros(n, dtype=bool)
    counts = np.zeros(n, dtype=np.int64)
    p_trace, mem_trace, delta_trace = [], [], []
    with T.no_grad():
        for _ in range(max_steps):
            if done.all():
                break
            res = model.step(images, mem)
            p = res.p_stop.data[:, 0]
            p_trace.append(p.copy())
            stop_now = (~done) & (p > 0.5)
            advance = (~done) & ~stop_now
            delta = np.zeros_like(mem.map)
            for i in np.nonzero(advance)[0]:
                plane = res.delta_m.data[i, 0]
                loc = np.unravel_index(int(plane.argmax()), plane.shape)
                delta[i] = render_peaks([loc], (h, w), sigma)[0]
                counts[i] += 1
            mem = update_memory(mem, delta)
            done = done | stop_now
            mem_trace.append(mem.map.copy())
            delta_trace.append(res.delta_m.data.copy())
    return CountInferResult(counts=counts, p_stop_trace=p_trace, memory_trace=mem_trace,
                            delta_trace=delta_trace, truncated=~done)


def e2e_decode(model, images, max_steps=64):
    """Greedy decode of an end-to-end baseline; returns (sequences, truncated).

    Sequences are trimmed at the stop token; nothing follows the end token.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    with T.no_grad():
        res = model.decode_sequence(images, max_steps=max_steps)
    seqs = []
    for i in range(images.shape[0]):
        seq = [int(res.tokens[i, t]) for t in range(res.tokens.shape[1]) if res.active[i, t]]
        seqs.append(seq)
    return seqs, res.truncated.copy()


# -- dataset-level evaluation ----------------------------------------------------------------

@dataclass
class MetricsReport:
    model_kind: str
    groups: dict = field(default_factory=dict)  # group key -> metric dict

    def table(self):
        if not self.groups:
            return "(empty report)"
        keys = sorted(self.groups)
        metrics = sorted({m for g in self.groups.values() for m in g
                          if isinstance(g[m], (int, float))})
        width = max(len(str(k)) for k in keys + metrics) + 2
        lines = [" " * 12 + "".join(f"{str(k):>{width}}" for k in keys)]
        for m in metrics:
            row = f"{m:<12}"
            for k in keys:
                v = self.groups[k].get(m)
                row += f"{v:>{width}.4f}" if isinstance(v, (int, float)) else " " * width
            lines.append(row)
        return "\n".join(lines)

    def to_dict(self):
        return {"model": self.model_kind, "groups": self.groups}


def _block_truth_tokens(label):
    seq = []
    for k in range(label.num_lines()):
        seq.extend(label.tokens(k))
    return seq


def _union_mask(label, size):
    from .memory import render_line_mask
    out = np.zeros(size, dtype=np.float32)
    for k in range(label.num_lines()):
        out = np.maximum(out, render_line_mask(label, k, size)[0, 0])
    return out


def _batched(n, size):
    for lo in range(0, n, size):
        yield range(lo, min(lo + size, n))


def eval_blocks_split(model, split, max_chars=20, batch_size=32, step_margin=4,
                      collect_traces=False):
    """Evaluate a block model on one split; returns a metric dict."""
    n = len(split)
    eds, pred_line_counts, ious, correct = [], [], [], []
    words_p, words_t = [], []
    monotone_ok = []
    max_lines = max(split.label(i).num_lines() for i in range(n))
    cap = step_margin * (max_lines + 1)
    for idxs in _batched(n, batch_size):
        images = np.stack([split.image(i) for i in idxs])
        labels = [split.label(i) for i in idxs]
        if model.kind == "block-parser":
            res = infer_block(model, images, max_steps=cap, max_chars=max_chars)
            pred_lines = res.lines
        else:
            seqs, _ = e2e_decode(model, images, max_steps=cap * (max_chars + 1))
            pred_lines = []
            for seq in seqs:
                cur, out = [], []
                for tok in seq:
                    if tok == model.eol:
                        out.append(cur)
                        cur = []
                    elif tok < model.vocab_size:
                        cur.append(tok)
                if cur:
                    out.append(cur)
                pred_lines.append(out)
        for j, (i, label) in enumerate(zip(idxs, labels)):
            truth = _block_truth_tokens(label)
            pred = [t for line in pred_lines[j] for t in line]
            ed = edit_distance_normalised(pred, truth)
            eds.append(ed)
            correct.append(ed == 0.0)
            pred_line_counts.append(len(pred_lines[j]))
            words_p.extend([tuple(l) for l in pred_lines[j]])
            words_t.extend([tuple(label.tokens(k)) for k in range(label.num_lines())])
            if model.kind == "block-parser":
                final = res.memory_trace[-1][j, 0] if res.memory_trace else np.zeros(images.shape[2:])
                union = _union_mask(label, images.shape[2:])
                pm = final >= 0.5
                um = union >= 0.5
                inter = float(np.logical_and(pm, um).sum())
                uni = float(np.logical_or(pm, um).sum())
                ious.append(inter / uni if uni else 1.0)
                prev = np.zeros_like(res.memory_trace[0][j, 0])
                mono = True
                for m_step in res.memory_trace:
                    cur = m_step[j, 0]
                    if not np.all(cur >= prev - 1e-6) or cur.min() < -1e-6 or cur.max() > 1 + 1e-6:
                        mono = False
                    prev = cur
                monotone_ok.append(mono)
    p, r, f = prf_metrics(words_p, words_t)
    out = {
        "ed": float(np.mean(eds)),
        "precision": p, "recall": r, "f": f,
        "exact": float(np.mean(correct)),
        "mean_pred_lines": float(np.mean(pred_line_counts)),
        "frac_pred_3_lines": float(np.mean([c == 3 for c in pred_line_counts])),
    }
    if model.kind == "block-parser":
        out["mean_final_iou"] = float(np.mean(ious))
        out["iou_ge_half_on_correct"] = float(np.mean([iou >= 0.5 for iou, c in zip(ious, correct) if c])) if any(correct) else 0.0
        out["monotone_frac"] = float(np.mean(monotone_ok))
    return out


def eval_counts_split(model, split, batch_size=32, step_margin=4, sigma=2.0):
    n = len(split)
    preds, truths = [], []
    max_count = max(split.label(i).count() for i in range(n))
    cap = step_margin * (max_count + 1)
    for idxs in _batched(n, batch_size):
        images = np.stack([split.image(i) for i in idxs])
        if model.kind == "counter":
            res = infer_count(model, images, max_steps=cap, sigma=sigma)
            batch_counts = res.counts
        else:
            seqs, _ = e2e_decode(model, images, max_steps=cap)
            batch_counts = [sum(1 for t in seq if t == 0) for seq in seqs]
        preds.extend(int(c) for c in batch_counts)
        truths.extend(split.label(i).count() for i in idxs)
    return {"accuracy": count_accuracy(preds, truths),
            "mean_pred": float(np.mean(preds)), "mean_truth": float(np.mean(truths))}


def evaluate_model(model, splits, max_chars=20, batch_size=32, sigma=2.0) -> MetricsReport:
    """Evaluate on every given split; keys are split names."""
    report = MetricsReport(model_kind=model.kind)
    for name, split in splits.items():
        if split.kind == "blocks":
            report.groups[name] = eval_blocks_split(model, split, max_chars=max_chars,
                                                    batch_size=batch_size)
        else:
            report.groups[name] = eval_counts_split(model, split, batch_size=batch_size,
                                                    sigma=sigma)
    return report
