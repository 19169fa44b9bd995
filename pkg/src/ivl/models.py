"""The three model families: inductive block parser, inductive enumerative
counter, and end-to-end attention baselines with a free learned LSTM state.

Both inductive models carry *only* a spatial memory map between outer steps;
the inner decoder LSTM state is re-initialised to zeros on every step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import (Attention, ConfigError, LSTMCell, Linear, build_encoder,
                     gaussian_param, make_param)
from .memory import SpatialMemory, concat_image_memory
from .tensor import Tensor, dump_tensor, load_tensor

CHECKPOINT_VERSION = 1


@dataclass
class DecodeResult:
    logits: list          # per step, Tensor (N, K)
    alphas: list          # per step, Tensor (N, h, w)
    tokens: np.ndarray    # (N, steps) greedy tokens (teacher echoes the teacher)
    active: np.ndarray    # (N, steps) bool: sample still decoding at that step
    truncated: np.ndarray  # (N,) bool: step cap hit before a stop token


class AttentionDecoder:
    """Soft-attention LSTM decoder over an encoded feature map.

    Input at each step is the attention context concatenated with a learned
    embedding of the previous token; decoding starts from a dedicated
    start-of-sequence embedding and a zero LSTM state.
    """

    def __init__(self, rng, channels, lstm_size, attn_embed, token_embed,
                 num_classes, num_embeddings, init="paper"):
        self.num_classes = num_classes
        self.sos = num_embeddings - 1  # last embedding row is start-of-sequence
        self.attention = Attention(rng, lstm_size, channels, attn_embed, init)
        self.lstm = LSTMCell(rng, channels + token_embed, lstm_size, init)
        self.embed = make_param(rng, (num_embeddings, token_embed), init, fan_in=token_embed)
        self.proj = Linear(rng, lstm_size, num_classes, init)

    def decode(self, feats, teacher=None, max_steps=None, stop_classes=()) -> DecodeResult:
        n = feats.shape[0]
        state = self.lstm.init_state(n, dtype=feats.dtype)
        prev = np.full(n, self.sos, dtype=np.int64)
        active = np.ones(n, dtype=bool)
        logits_steps, alpha_steps, token_steps, active_steps = [], [], [], []
        steps = teacher.shape[1] if teacher is not None else max_steps
        for t in range(steps):
            context, alpha = self.attention(state.h, feats)
            x = T.concat([context, T.tslice(self.embed, prev)], axis=1)
            state = self.lstm.step(state, x)
            logits = self.proj(state.h)
            logits_steps.append(logits)
            alpha_steps.append(alpha)
            active_steps.append(active.copy())
            if teacher is not None:
                tok = teacher[:, t]
            else:
                tok = logits.data.argmax(axis=1)
            token_steps.append(tok)
            stopped = np.isin(tok, stop_classes)
            active = active & ~stopped
            prev = tok
            if teacher is None and not active.any():
                break
        return DecodeResult(
            logits=logits_steps,
            alphas=alpha_steps,
            tokens=np.stack(token_steps, axis=1),
            active=np.stack(active_steps, axis=1),
            truncated=active,
        )

    def parameters(self):
        params = {"embed": self.embed}
        for name, sub in (("attention", self.attention), ("lstm", self.lstm), ("proj", self.proj)):
            params.update({f"{name}.{k}": v for k, v in sub.parameters().items()})
        return params


def _as_memory_array(m):
    return m.map if isinstance(m, SpatialMemory) else np.asarray(m)


def _memory_obj(m, n, h, w):
    if isinstance(m, SpatialMemory):
        return m
    return SpatialMemory(map=np.asarray(m, dtype=np.float32).reshape(n, 1, h, w))


@dataclass
class BlockStepResult:
    logits: list            # per decode step, Tensor (N, K)
    tokens: np.ndarray      # (N, steps)
    char_mask: np.ndarray   # (N, steps) float: step emitted a symbol while active
    s_alpha: Tensor         # (N, 1, H, W) accumulated attention, image resolution
    s_alpha_feat: Tensor    # (N, 1, h', w') pre-upsampling
    alphas: list
    active: np.ndarray
    delta_m: Tensor         # (N, 1, H, W)
    truncated: np.ndarray


class BlockParser:
    """Inductive multi-line parser: one line recognised per outer step."""

    kind = "block-parser"

    def __init__(self, rng, vocab_size, image_channels=1, encoder="toy-6conv",
                 lstm_size=128, attn_embed=128, token_embed=32, delta_filters=32,
                 norm="affine", init="paper"):
        self.hyper = dict(vocab_size=vocab_size, image_channels=image_channels,
                          encoder=encoder, lstm_size=lstm_size, attn_embed=attn_embed,
                          token_embed=token_embed, delta_filters=delta_filters,
                          norm=norm, init=init)
        self.vocab_size = vocab_size
        self.eol = vocab_size
        self.eob = vocab_size + 1
        self.num_classes = vocab_size + 2
        self.encoder = build_encoder(encoder, image_channels + 1, rng, norm, init)
        c = self.encoder.out_channels
        self.decoder = AttentionDecoder(rng, c, lstm_size, attn_embed, token_embed,
                                        self.num_classes, vocab_size + 3, init)
        df = delta_filters
        self.delta_w1 = make_param(rng, (df, c + 1, 3, 3), init, fan_in=(c + 1) * 9)
        self.delta_b1 = gaussian_param(rng, (df,), 0.01)
        self.delta_w2 = make_param(rng, (df, df, 3, 3), init, fan_in=df * 9)
        self.delta_b2 = gaussian_param(rng, (df,), 0.01)
        self.delta_w3 = make_param(rng, (1, df, 1, 1), init, fan_in=df)
        self.delta_b3 = gaussian_param(rng, (1,), 0.01)

    def step(self, x, m, max_chars=20, teacher=None) -> BlockStepResult:
        """One inductive step: decode one line and regress the memory update.

        ``x``: (N,C,H,W) image, ``m``: SpatialMemory or (N,1,H,W) array.
        ``teacher``: (N,L) target tokens for teacher forcing, else greedy until
        end-of-line / end-of-block or ``max_chars`` symbols.
        """
        x = np.asarray(x)
        n, _, h, w = x.shape
        mem = _memory_obj(m, n, h, w)
        z = Tensor(concat_image_memory(x, mem))
        feats = self.encoder(z)
        dec = self.decoder.decode(feats, teacher=teacher, max_steps=max_chars + 1,
                                  stop_classes=(self.eol, self.eob))
        steps = dec.tokens.shape[1]
        # attention maps of symbol predictions only (end tokens excluded)
        char_mask = (dec.tokens < self.vocab_size) & dec.active
        char_mask = char_mask.astype(feats.data.dtype)
        fh, fw = dec.alphas[0].shape[1:]
        s_alpha = None
        for t in range(steps):
            weighted = T.mul(dec.alphas[t], Tensor(char_mask[:, t].reshape(n, 1, 1)))
            s_alpha = weighted if s_alpha is None else T.add(s_alpha, weighted)
        s_alpha_feat = T.reshape(s_alpha, (n, 1, fh, fw))
        head_in = T.concat([feats, s_alpha_feat], axis=1)
        d = T.relu(T.conv2d(head_in, self.delta_w1, self.delta_b1))
        d = T.relu(T.conv2d(d, self.delta_w2, self.delta_b2))
        d = T.conv2d(d, self.delta_w3, self.delta_b3)
        delta_m = T.upsample_to(d, (h, w))
        return BlockStepResult(
            logits=dec.logits, tokens=dec.tokens, char_mask=char_mask,
            s_alpha=T.upsample_to(s_alpha_feat, (h, w)), s_alpha_feat=s_alpha_feat,
            alphas=dec.alphas, active=dec.active,
            delta_m=delta_m, truncated=dec.truncated,
        )

    def parameters(self):
        params = {}
        params.update({f"encoder.{k}": v for k, v in self.encoder.parameters().items()})
        params.update({f"decoder.{k}": v for k, v in self.decoder.parameters().items()})
        params.update({
            "delta.conv1.weight": self.delta_w1, "delta.conv1.bias": self.delta_b1,
            "delta.conv2.weight": self.delta_w2, "delta.conv2.bias": self.delta_b2,
            "delta.conv3.weight": self.delta_w3, "delta.conv3.bias": self.delta_b3,
        })
        return params


@dataclass
class CounterStepResult:
    stop_logit: Tensor  # (N, 1) pre-sigmoid
    p_stop: Tensor      # (N, 1)
    delta_m: Tensor     # (N, 1, H, W)


class Counter:
    """Inductive enumerative counter: one object accounted for per step."""

    kind = "counter"

    def __init__(self, rng, image_channels=3, encoder="count-6res",
                 norm="affine", init="paper"):
        self.hyper = dict(image_channels=image_channels, encoder=encoder,
                          norm=norm, init=init)
        self.encoder = build_encoder(encoder, image_channels + 1, rng, norm, init)
        c = self.encoder.out_channels
        self.head_w = make_param(rng, (1, c, 1, 1), init, fan_in=c)
        self.head_b = gaussian_param(rng, (1,), 0.01)
        self.stop_w = gaussian_param(rng, (1,), 0.01)
        self.stop_b = gaussian_param(rng, (1,), 0.01)

    def step(self, x, m) -> CounterStepResult:
        """p_stop = sigmoid(w * maxpool(delta_m) + b); delta_m from a 1x1 conv."""
        x = np.asarray(x)
        n, _, h, w = x.shape
        mem = _memory_obj(m, n, h, w)
        feats = self.encoder(Tensor(concat_image_memory(x, mem)))
        delta = T.conv2d(feats, self.head_w, self.head_b)
        if self.encoder.downsample_factor != 1:
            delta = T.upsample_to(delta, (h, w))
        mx = T.reshape(T.global_max_pool(delta), (n, 1))
        logit = T.add(T.mul(mx, self.stop_w), self.stop_b)
        return CounterStepResult(stop_logit=logit, p_stop=T.sigmoid(logit), delta_m=delta)

    def parameters(self):
        params = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        params.update({"head.weight": self.head_w, "head.bias": self.head_b,
                       "stop.w": self.stop_w, "stop.b": self.stop_b})
        return params


def sample_next_object(remaining, rng):
    """Uniformly pick one of the remaining object centres (training-time choice)."""
    remaining = list(remaining)
    if not remaining:
        raise ValueError("no remaining objects to sample (training-data construction bug)")
    idx = int(rng.integers(0, len(remaining)))
    chosen = remaining[idx]
    return chosen, remaining[:idx] + remaining[idx + 1:]


class E2EBlockModel:
    """Soft-attention baseline decoding the whole block with a learned state."""

    kind = "e2e-blocks"

    def __init__(self, rng, vocab_size, image_channels=1, encoder="toy-6conv",
                 lstm_size=128, attn_embed=128, token_embed=32,
                 norm="affine", init="paper"):
        self.hyper = dict(vocab_size=vocab_size, image_channels=image_channels,
                          encoder=encoder, lstm_size=lstm_size, attn_embed=attn_embed,
                          token_embed=token_embed, norm=norm, init=init)
        self.vocab_size = vocab_size
        self.eol = vocab_size
        self.eob = vocab_size + 1
        self.num_classes = vocab_size + 2
        self.encoder = build_encoder(encoder, image_channels, rng, norm, init)
        self.decoder = AttentionDecoder(rng, self.encoder.out_channels, lstm_size,
                                        attn_embed, token_embed, self.num_classes,
                                        vocab_size + 3, init)

    def decode_sequence(self, x, teacher=None, max_steps=64) -> DecodeResult:
        feats = self.encoder(Tensor(np.asarray(x)))
        return self.decoder.decode(feats, teacher=teacher, max_steps=max_steps,
                                   stop_classes=(self.eob,))

    def parameters(self):
        params = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        params.update({f"decoder.{k}": v for k, v in self.decoder.parameters().items()})
        return params


class E2ECountModel:
    """End-to-end counting baseline: emits 0 per object then 1 to stop."""

    kind = "e2e-counter"

    def __init__(self, rng, image_channels=3, encoder="count-6res",
                 lstm_size=128, attn_embed=128, token_embed=32,
                 norm="affine", init="paper"):
        self.hyper = dict(image_channels=image_channels, encoder=encoder,
                          lstm_size=lstm_size, attn_embed=attn_embed,
                          token_embed=token_embed, norm=norm, init=init)
        self.num_classes = 2
        self.encoder = build_encoder(encoder, image_channels, rng, norm, init)
        self.decoder = AttentionDecoder(rng, self.encoder.out_channels, lstm_size,
                                        attn_embed, token_embed, 2, 3, init)

    def decode_sequence(self, x, teacher=None, max_steps=64) -> DecodeResult:
        feats = self.encoder(Tensor(np.asarray(x)))
        return self.decoder.decode(feats, teacher=teacher, max_steps=max_steps,
                                   stop_classes=(1,))

    def parameters(self):
        params = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        params.update({f"decoder.{k}": v for k, v in self.decoder.parameters().items()})
        return params


MODEL_KINDS = {
    "block-parser": BlockParser,
    "counter": Counter,
    "e2e-blocks": E2EBlockModel,
    "e2e-counter": E2ECountModel,
}


def build_model(kind, hyper, rng):
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; valid kinds: {sorted(MODEL_KINDS)}")
    return MODEL_KINDS[kind](rng, **hyper)


def model_summary(model):
    """Parameter counts grouped by top-level component."""
    groups = {}
    for name, p in model.parameters().items():
        group = name.split(".", 1)[0]
        groups[group] = groups.get(group, 0) + p.size
    groups["total"] = sum(v for k, v in groups.items() if k != "total")
    return groups


def save_checkpoint(model, path, train_state=None):
    """Checkpoint = manifest (kind, hyperparameters, format version) + one
    tensor dump per named parameter."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "hyper": model.hyper,
        "params": sorted(params),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    for name, p in params.items():
        dump_tensor(path / "params" / f"{name}.ivlt", p.data)
    if train_state is not None:
        state_dir = path / "train_state"
        state_dir.mkdir(exist_ok=True)
        meta = {k: v for k, v in train_state.items() if not isinstance(v, dict)}
        (state_dir / "meta.json").write_text(json.dumps(meta) + "\n")
        for group in ("eg2", "edx2"):
            if group in train_state:
                (state_dir / group).mkdir(exist_ok=True)
                for name, arr in train_state[group].items():
                    dump_tensor(state_dir / group / f"{name}.ivlt", arr)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint directory; returns (model, train_state)."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest['format_version']}")
    hyper = dict(manifest["hyper"])
    if "encoder" in hyper and isinstance(hyper["encoder"], list):
        hyper["encoder"] = list(hyper["encoder"])
    model = build_model(manifest["kind"], hyper, np.random.default_rng(0))
    params = model.parameters()
    for name in manifest["params"]:
        arr = load_tensor(path / "params" / f"{name}.ivlt")
        if tuple(arr.shape) != tuple(params[name].shape):
            raise ValueError(f"checkpoint param {name} has shape {arr.shape}, model expects {params[name].shape}")
        params[name].data = arr
    train_state = None
    state_dir = path / "train_state"
    if state_dir.exists():
        train_state = json.loads((state_dir / "meta.json").read_text())
        for group in ("eg2", "edx2"):
            gdir = state_dir / group
            if gdir.exists():
                train_state[group] = {f.stem: load_tensor(f) for f in gdir.glob("*.ivlt")}
    return model, train_state
