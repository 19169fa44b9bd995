"""One-step inductive training, end-to-end baseline training, and AdaDelta.

Inductive training samples are tuples (x, y_t, m_t, m_{t+1}) enumerated with
teacher-forced ground-truth memories; the loss combines the token
cross-entropy with a pixel-wise reconstruction of the memory update.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .memory import BlockLabel, CountLabel, block_memory, render_line_mask, render_peaks
from .models import sample_next_object
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingSample:
    image: np.ndarray        # (C, H, W)
    targets: np.ndarray      # int token ids for this step
    m_t: np.ndarray          # (1, 1, H, W)
    m_next: np.ndarray       # (1, 1, H, W)
    delta_target: np.ndarray  # (1, 1, H, W) regression target for the update


def audit_sample(s: TrainingSample, atol=1e-5):
    """Consistency assertions on a sample's (m_t, m_next, delta_target) triple."""
    assert s.m_t.min() >= -atol and s.m_t.max() <= 1 + atol
    assert s.m_next.min() >= -atol and s.m_next.max() <= 1 + atol
    assert np.all(s.m_next >= s.m_t - atol), "memory must be monotone"
    # the regression target must cover the actual increment
    assert np.all(s.delta_target >= (s.m_next - s.m_t) - 1e-3)


def enumerate_block_samples(image, label: BlockLabel, eol, eob):
    """All inductive steps of one labelled block: one per line plus the
    end-of-block step (a 3-line image yields 4 samples)."""
    h, w = image.shape[1:]
    samples = []
    m = block_memory(label, 0, (h, w))
    for k in range(label.num_lines()):
        mask = render_line_mask(label, k, (h, w))
        m_next = np.maximum(m, mask)
        targets = np.array(label.tokens(k) + [eol], dtype=np.int64)
        samples.append(TrainingSample(image=image, targets=targets, m_t=m,
                                      m_next=m_next, delta_target=mask))
        m = m_next
    samples.append(TrainingSample(image=image, targets=np.array([eob], dtype=np.int64),
                                  m_t=m, m_next=m, delta_target=np.zeros_like(m)))
    return samples


def enumerate_count_samples(image, label: CountLabel, sigma, rng):
    """Inductive steps for a counting scene: the memory gains one randomly
    chosen object's peak per step; the regression target holds peaks of all
    remaining objects."""
    h, w = image.shape[1:]
    samples = []
    remaining = list(label.centres)
    m = np.zeros((1, 1, h, w), dtype=np.float32)
    while remaining:
        delta_target = render_peaks(remaining, (h, w), sigma)
        chosen, reduced = sample_next_object(remaining, rng)
        chosen_peak = render_peaks([chosen], (h, w), sigma)
        m_next = np.clip(m + chosen_peak, 0.0, 1.0)
        samples.append(TrainingSample(image=image, targets=np.array([0], dtype=np.int64),
                                      m_t=m, m_next=m_next, delta_target=delta_target))
        m = m_next
        remaining = reduced
    zero = np.zeros_like(m)
    samples.append(TrainingSample(image=image, targets=np.array([1], dtype=np.int64),
                                  m_t=m, m_next=m, delta_target=zero))
    return samples


# -- losses ---------------------------------------------------------------------------

def _loss_terms(token_logprob, m_t, delta_pred, m_next, gamma):
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    token_term = T.neg(token_logprob)
    recon = T.mse(T.add(Tensor(np.asarray(m_t, dtype=delta_pred.dtype)), delta_pred),
                  Tensor(np.asarray(m_next, dtype=delta_pred.dtype)))
    loss = T.add(token_term, T.mul(recon, Tensor(np.asarray(gamma, dtype=delta_pred.dtype))))
    return loss, token_term, recon


def inductive_loss(token_logprob, m_t, delta_pred, m_next, gamma):
    """loss = -log p(y_t) + gamma * MSE(m_t + delta_pred, m_next)."""
    return _loss_terms(token_logprob, m_t, delta_pred, m_next, gamma)[0]


def binary_stop_loss(stop_logit, targets):
    """Mean binary cross-entropy from logits: softplus(z) - z * y."""
    y = Tensor(np.asarray(targets, dtype=stop_logit.dtype).reshape(stop_logit.shape))
    absz = T.add(T.relu(stop_logit), T.relu(T.neg(stop_logit)))
    one = Tensor(np.ones((), dtype=stop_logit.dtype))
    softplus = T.add(T.relu(stop_logit), T.log(T.add(one, T.exp(T.neg(absz)))))
    return T.tmean(T.sub(softplus, T.mul(stop_logit, y)))


# -- AdaDelta -----------------------------------------------------------------------

class AdaDelta:
    """Per-parameter accumulators E[g^2] and E[dx^2] with decay rho.

    dx = -(sqrt(E[dx^2]+eps) / sqrt(E[g^2]+eps)) * g, applied in place.
    """

    def __init__(self, params, rho=0.95, eps=1e-6):
        self.params = dict(params)
        self.rho = rho
        self.eps = eps
        self.eg2 = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.edx2 = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        rho, eps = self.rho, self.eps
        for name, p in self.params.items():
            g = p.grad
            eg2, edx2 = self.eg2[name], self.edx2[name]
            if g is None:
                eg2 *= rho
                edx2 *= rho
                continue
            eg2 *= rho
            eg2 += (1.0 - rho) * g * g
            dx = -np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * g
            p.data += dx.astype(p.data.dtype, copy=False)
            edx2 *= rho
            edx2 += (1.0 - rho) * dx * dx
            p.grad = None

    def state(self):
        return {"eg2": dict(self.eg2), "edx2": dict(self.edx2)}

    def load_state(self, state):
        for name in self.params:
            if name in state.get("eg2", {}):
                self.eg2[name] = np.asarray(state["eg2"][name], dtype=np.float32)
                self.edx2[name] = np.asarray(state["edx2"][name], dtype=np.float32)


def adadelta_update(params, grads, state: AdaDelta):
    """Functional wrapper: assign ``grads`` and apply one AdaDelta step."""
    for name, g in grads.items():
        state.params[name].grad = g
    state.step()
    return state


# -- batching helpers -----------------------------------------------------------------

def _batch_block_forward(model, batch, gamma):
    xs = np.stack([s.image for s in batch])
    m_t = np.concatenate([s.m_t for s in batch])
    m_next = np.concatenate([s.m_next for s in batch])
    targets = np.stack([s.targets for s in batch])
    res = model.step(xs, m_t, teacher=targets)
    n = len(batch)
    ce = None
    for t in range(targets.shape[1]):
        step_ce = T.cross_entropy(res.logits[t], targets[:, t], reduction="sum")
        ce = step_ce if ce is None else T.add(ce, step_ce)
    inv_n = Tensor(np.asarray(1.0 / n, dtype=ce.dtype))
    logprob = T.neg(T.mul(ce, inv_n))
    # for blocks the delta target is exactly m_next - m_t
    return _loss_terms(logprob, m_t, res.delta_m, m_next, gamma)


def _batch_counter_forward(model, batch, gamma):
    xs = np.stack([s.image for s in batch])
    m_t = np.concatenate([s.m_t for s in batch])
    targets = np.array([int(s.targets[0]) for s in batch])
    delta_targets = np.concatenate([s.delta_target for s in batch])
    res = model.step(xs, m_t)
    bce = binary_stop_loss(res.stop_logit, targets)
    # regression target: memory plus peaks of all remaining objects
    return _loss_terms(T.neg(bce), m_t, res.delta_m, np.clip(m_t + delta_targets, 0.0, 1.0), gamma)


def _batch_e2e_forward(model, images, targets, gamma=None):
    xs = np.stack(images)
    tgt = np.stack(targets)
    res = model.decode_sequence(xs, teacher=tgt)
    ce = None
    for t in range(tgt.shape[1]):
        step_ce = T.cross_entropy(res.logits[t], tgt[:, t], reduction="sum")
        ce = step_ce if ce is None else T.add(ce, step_ce)
    inv = Tensor(np.asarray(1.0 / len(images), dtype=ce.dtype))
    loss = T.mul(ce, inv)
    return loss, loss, None


# -- training loops ----------------------------------------------------------------------

def e2e_block_targets(label: BlockLabel, eol, eob):
    seq = []
    for k in range(label.num_lines()):
        seq.extend(label.tokens(k))
        seq.append(eol)
    seq.append(eob)
    return np.array(seq, dtype=np.int64)


def e2e_count_targets(label: CountLabel):
    return np.array([0] * label.count() + [1], dtype=np.int64)


class _Logger:
    def __init__(self, path):
        self.path = Path(path)
        self.fh = open(self.path, "a")
        self.t0 = time.time()

    def log(self, **record):
        record["wall_time"] = round(time.time() - self.t0, 3)
        self.fh.write(json.dumps(record) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _dump_diverged_batch(out_dir, batch_arrays, step):
    dump = Path(out_dir) / f"diverged_step{step}.npz"
    np.savez(dump, **batch_arrays)
    return dump


@dataclass
class TrainResult:
    steps: int
    final_loss: float
    best_val: float
    loss_trace: list
    checkpoint_dir: Path
    stopped_early: bool


def _iter_batches(descriptors, batch_size, rng, key=None):
    """Shuffle descriptors and yield batches grouped by ``key`` (target length)."""
    order = rng.permutation(len(descriptors))
    buckets = {}
    for i in order:
        d = descriptors[i]
        buckets.setdefault(key(d) if key else 0, []).append(d)
    streams = list(buckets.values())
    while any(streams):
        weights = np.array([len(s) for s in streams], dtype=np.float64)
        pick = int(rng.choice(len(streams), p=weights / weights.sum()))
        stream = streams[pick]
        yield stream[:batch_size]
        del stream[:batch_size]
        streams = [s for s in streams if s]


def train_model(model, train_split, cfg, out_dir, resume_state=None, audit=False):
    """Generic training loop driving the per-kind batch forward functions.

    Returns a TrainResult; writes a JSONL training log and periodic
    checkpoints (final checkpoint under ``out_dir/checkpoint``).
    """
    from .models import save_checkpoint

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    opt = AdaDelta(model.parameters(), rho=cfg.rho, eps=cfg.epsilon)
    start_step = 0
    if resume_state:
        opt.load_state(resume_state)
        start_step = int(resume_state.get("step", 0))

    n_total = len(train_split)
    n_val = max(1, int(round(0.05 * n_total)))
    val_idx = set(int(i) for i in rng.permutation(n_total)[:n_val])
    train_ids = [i for i in range(n_total) if i not in val_idx]
    val_ids = sorted(val_idx)

    kind = model.kind
    sigma = getattr(cfg, "sigma", 2.0)

    def materialise(i):
        image = train_split.image(i)
        label = train_split.label(i)
        if kind == "block-parser":
            return enumerate_block_samples(image, label, model.eol, model.eob)
        if kind == "counter":
            srng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 77, i]))
            return enumerate_count_samples(image, label, sigma, srng)
        if kind == "e2e-blocks":
            return [(image, e2e_block_targets(label, model.eol, model.eob))]
        return [(image, e2e_count_targets(label))]

    # descriptors are (image index, step index); samples rendered per batch
    descriptors = []
    lengths = {}
    for i in train_ids:
        per = materialise(i)
        lengths[i] = [len(s.targets) if isinstance(s, TrainingSample) else len(s[1]) for s in per]
        descriptors.extend((i, t) for t in range(len(per)))
    if audit:
        for i in train_ids:
            for s in materialise(i):
                if isinstance(s, TrainingSample):
                    audit_sample(s)

    sample_cache = {}

    def fetch(desc):
        i, t = desc
        if i not in sample_cache:
            if len(sample_cache) > 256:
                sample_cache.clear()
            sample_cache[i] = materialise(i)
        return sample_cache[i][t]

    def forward(batch_descs):
        batch = [fetch(d) for d in batch_descs]
        if kind == "block-parser":
            return _batch_block_forward(model, batch, cfg.gamma), batch
        if kind == "counter":
            return _batch_counter_forward(model, batch, cfg.gamma), batch
        images = [b[0] for b in batch]
        targets = [b[1] for b in batch]
        return _batch_e2e_forward(model, images, targets), batch

    def val_loss():
        total, count = 0.0, 0
        with T.no_grad():
            for i in val_ids:
                per = materialise(i)
                for t in range(0, len(per), cfg.batch_size):
                    chunk = per[t:t + cfg.batch_size]
                    if kind == "block-parser":
                        groups = {}
                        for s in chunk:
                            groups.setdefault(len(s.targets), []).append(s)
                        for grp in groups.values():
                            (loss, _, _) = _batch_block_forward(model, grp, cfg.gamma)
                            total += float(loss.data) * len(grp)
                            count += len(grp)
                    elif kind == "counter":
                        (loss, _, _) = _batch_counter_forward(model, chunk, cfg.gamma)
                        total += float(loss.data) * len(chunk)
                        count += len(chunk)
                    else:
                        (loss, _, _) = _batch_e2e_forward(model, [c[0] for c in chunk],
                                                          [c[1] for c in chunk])
                        total += float(loss.data) * len(chunk)
                        count += len(chunk)
        return total / max(count, 1)

    logger = _Logger(out_dir / "train_log.jsonl")
    if kind in ("block-parser", "counter"):
        key = lambda d: lengths[d[0]][d[1]]
    else:
        key = lambda d: lengths[d[0]][0]

    step = start_step
    best_val = np.inf
    bad_evals = 0
    loss_trace = []
    stopped_early = False
    ckpt_dir = out_dir / "checkpoint"
    try:
        while step < cfg.max_steps and not stopped_early:
            epoch_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11, step]))
            for batch_descs in _iter_batches(descriptors, cfg.batch_size, epoch_rng, key=key):
                (loss, token_loss, recon_loss), batch = forward(batch_descs)
                if not np.isfinite(loss.data):
                    arrays = {"loss": np.asarray(loss.data)}
                    if isinstance(batch[0], TrainingSample):
                        arrays["images"] = np.stack([b.image for b in batch])
                    dump = _dump_diverged_batch(out_dir, arrays, step)
                    raise TrainingDiverged(f"non-finite loss at step {step}; batch dumped to {dump}")
                loss.backward()
                opt.step()
                step += 1
                lv = float(loss.data)
                loss_trace.append(lv)
                logger.log(step=step, loss=lv, token_loss=float(token_loss.data),
                           recon_loss=float(recon_loss.data) if recon_loss is not None else None)
                if step % cfg.eval_every == 0:
                    vl = val_loss()
                    logger.log(step=step, val_loss=vl)
                    if vl < best_val - 1e-6:
                        best_val = vl
                        bad_evals = 0
                    else:
                        bad_evals += 1
                        if bad_evals >= cfg.patience:
                            stopped_early = True
                            break
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(model, ckpt_dir,
                                    train_state={"step": step, **opt.state()})
                if step >= cfg.max_steps:
                    break
    finally:
        logger.close()
    save_checkpoint(model, ckpt_dir, train_state={"step": step, **opt.state()})
    return TrainResult(steps=step, final_loss=loss_trace[-1] if loss_trace else np.nan,
                       best_val=best_val, loss_trace=loss_trace,
                       checkpoint_dir=ckpt_dir, stopped_early=stopped_early)


def train_inductive(model, train_split, cfg, out_dir, resume_state=None, audit=False):
    if model.kind not in ("block-parser", "counter"):
        raise ValueError(f"train_inductive expects an inductive model, got {model.kind}")
    return train_model(model, train_split, cfg, out_dir, resume_state, audit=audit)


def train_e2e(model, train_split, cfg, out_dir, resume_state=None):
    if model.kind not in ("e2e-blocks", "e2e-counter"):
        raise ValueError(f"train_e2e expects an end-to-end model, got {model.kind}")
    return train_model(model, train_split, cfg, out_dir, resume_state)
