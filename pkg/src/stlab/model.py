"""The speech translation network and its decoding.

A conv frontend (two 3x3 stride-2 layers, 4x time downsampling) feeds a
stack of pre-norm Transformer encoder blocks with two taps: a mid tap after
block ``tap`` used by the transcription and masked-word objectives, and a
top tap after the last block used by the word-translation and translation
objectives.  Two separate decoders exist: one over the source vocabulary
for the transcription phase, one over the target vocabulary for
translation.  Heads: CTC (source vocab + blank), masked-word projection,
word-translation projection, and a frame reconstruction head.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .data import BOS_ID, EOS_ID, write_tensor, read_tensor

NEG_INF_MASK = -1e9


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int
    src_vocab: int
    tgt_vocab: int
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 128
    n_enc: int = 6
    n_dec: int = 3
    tap: int = 4
    max_len: int = 512
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise InputError(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads"
            )
        if not (1 <= self.tap <= self.n_enc):
            raise InputError(f"tap layer {self.tap} outside [1, {self.n_enc}]")
        if self.src_vocab < 1 or self.tgt_vocab < 1:
            raise InputError("vocabularies must be nonempty")
        if self.feat_dim < 1:
            raise InputError("feature dimension must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


_PAPER_SCALE = dict(d_model=256, n_heads=4, d_ff=2048, n_enc=12, n_dec=6, tap=8)
_DESK_SCALE = dict(d_model=32, n_heads=4, d_ff=128, n_enc=6, n_dec=3, tap=4)


def profile_overrides(profile):
    """Model-size presets: the published scale and the laptop scale."""
    if profile == "paper":
        return dict(_PAPER_SCALE)
    if profile == "desk":
        return dict(_DESK_SCALE)
    raise InputError(f"unknown profile {profile!r}")


# ---------------------------------------------------------------------------
# parameters


def _freq_after_conv(feat_dim):
    return (feat_dim + 3) // 4  # two ceil-halvings


def param_shapes(config):
    """Ordered name -> (shape, kind) map; kind picks the initializer."""
    d, ff = config.d_model, config.d_ff
    shapes = {}

    def block(prefix):
        shapes[f"{prefix}.att_norm_g"] = ((d,), "gain")
        shapes[f"{prefix}.att_norm_b"] = ((d,), "bias")
        for part in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{part}"] = ((d, d), "matrix")
            shapes[f"{prefix}.b{part}"] = ((d,), "bias")
        shapes[f"{prefix}.ffn_norm_g"] = ((d,), "gain")
        shapes[f"{prefix}.ffn_norm_b"] = ((d,), "bias")
        shapes[f"{prefix}.ffn_w1"] = ((d, ff), "matrix")
        shapes[f"{prefix}.ffn_b1"] = ((ff,), "bias")
        shapes[f"{prefix}.ffn_w2"] = ((ff, d), "matrix")
        shapes[f"{prefix}.ffn_b2"] = ((d,), "bias")

    shapes["conv.w1"] = ((d, 1, 3, 3), "conv")
    shapes["conv.b1"] = ((d,), "bias")
    shapes["conv.w2"] = ((d, d, 3, 3), "conv")
    shapes["conv.b2"] = ((d,), "bias")
    shapes["conv.proj_w"] = ((d * _freq_after_conv(config.feat_dim), d), "matrix")
    shapes["conv.proj_b"] = ((d,), "bias")
    for i in range(config.n_enc):
        block(f"enc{i}")
    shapes["enc_norm_mid.g"] = ((d,), "gain")
    shapes["enc_norm_mid.b"] = ((d,), "bias")
    shapes["enc_norm_top.g"] = ((d,), "gain")
    shapes["enc_norm_top.b"] = ((d,), "bias")
    shapes["ctc.w"] = ((d, config.src_vocab + 1), "matrix")
    shapes["ctc.b"] = ((config.src_vocab + 1,), "bias")
    shapes["fmlm.w"] = ((d, config.src_vocab), "matrix")
    shapes["fblt.w"] = ((d, config.tgt_vocab), "matrix")
    shapes["recon.w"] = ((d, 4 * config.feat_dim), "matrix")
    shapes["recon.b"] = ((4 * config.feat_dim,), "bias")

    for name, vocab in (("dec_asr", config.src_vocab), ("dec_st", config.tgt_vocab)):
        shapes[f"{name}.emb"] = ((vocab, d), "embedding")
        for i in range(config.n_dec):
            block(f"{name}.blk{i}.self")
            # cross attention reuses the block layout minus the ffn
            shapes[f"{name}.blk{i}.cross_norm_g"] = ((d,), "gain")
            shapes[f"{name}.blk{i}.cross_norm_b"] = ((d,), "bias")
            for part in ("q", "k", "v", "o"):
                shapes[f"{name}.blk{i}.cross_w{part}"] = ((d, d), "matrix")
                shapes[f"{name}.blk{i}.cross_b{part}"] = ((d,), "bias")
        shapes[f"{name}.norm_g"] = ((d,), "gain")
        shapes[f"{name}.norm_b"] = ((d,), "bias")
        shapes[f"{name}.out_w"] = ((d, vocab), "matrix")
        shapes[f"{name}.out_b"] = ((vocab,), "bias")
    return shapes


def _draw(rng, shape, kind, d_model, dtype):
    if kind == "gain":
        return np.ones(shape, dtype=dtype)
    if kind == "bias":
        return np.zeros(shape, dtype=dtype)
    if kind == "matrix":
        bound = 1.0 / math.sqrt(shape[0])
    elif kind == "conv":
        bound = 1.0 / math.sqrt(shape[1] * shape[2] * shape[3])
    elif kind == "embedding":
        bound = 1.0 / math.sqrt(d_model)
    else:
        raise ValueError(kind)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ModelParams:
    """Named parameter tensors; creation order is fixed by ``param_shapes``."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    @classmethod
    def init(cls, config, seed, dtype=np.float32):
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, (shape, kind) in param_shapes(config).items():
            tensors[name] = ad.DiffTensor(_draw(rng, shape, kind, config.d_model, dtype))
        return cls(config, tensors)

    def reinit(self, prefixes, seed):
        """Re-draw every tensor whose name starts with one of the prefixes."""
        rng = np.random.default_rng(seed)
        dtype = next(iter(self.tensors.values())).data.dtype
        for name, (shape, kind) in param_shapes(self.config).items():
            if any(name.startswith(p) for p in prefixes):
                self.tensors[name].data = _draw(rng, shape, kind, self.config.d_model, dtype)
                self.tensors[name].grad = None

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def num_params(self):
        return sum(int(np.prod(s)) for s, _ in param_shapes(self.config).values())

    def astype(self, dtype):
        return ModelParams(
            self.config,
            {k: ad.DiffTensor(v.data.astype(dtype)) for k, v in self.tensors.items()},
        )

    def copy(self):
        return ModelParams(
            self.config,
            {k: ad.DiffTensor(v.data.copy()) for k, v in self.tensors.items()},
        )


def encoder_prefixes(config, depth):
    """Parameter prefixes the encoder uses when run to ``depth`` blocks."""
    prefixes = ["conv."] + [f"enc{i}." for i in range(depth)] + ["enc_norm_mid."]
    if depth == config.n_enc:
        prefixes.append("enc_norm_top.")
    return prefixes


# ---------------------------------------------------------------------------
# forward pieces

_POSENC_CACHE = {}


def positional_encoding(length, d_model, dtype):
    key = (length, d_model, np.dtype(dtype).str)
    if key not in _POSENC_CACHE:
        position = np.arange(length)[:, None].astype(np.float64)
        div = np.exp(np.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
        table = np.zeros((length, d_model))
        table[:, 0::2] = np.sin(position * div)
        table[:, 1::2] = np.cos(position * div)
        _POSENC_CACHE[key] = table.astype(dtype)
    return _POSENC_CACHE[key]


_CAUSAL_CACHE = {}


def causal_mask(length, dtype):
    key = (length, np.dtype(dtype).str)
    if key not in _CAUSAL_CACHE:
        mask = np.triu(np.full((length, length), NEG_INF_MASK), k=1).astype(dtype)
        _CAUSAL_CACHE[key] = mask
    return _CAUSAL_CACHE[key]


def _attention(params, prefix, query, keys_from=None, causal=False, config=None):
    d, heads = config.d_model, config.n_heads
    dh = d // heads
    kv = query if keys_from is None else keys_from
    lq = query.data.shape[0]
    lk = kv.data.shape[0]
    q = ad.linear(query, params[f"{prefix}wq"], params[f"{prefix}bq"])
    k = ad.linear(kv, params[f"{prefix}wk"], params[f"{prefix}bk"])
    v = ad.linear(kv, params[f"{prefix}wv"], params[f"{prefix}bv"])

    def heads_first(x, length):
        return ad.transpose(ad.reshape(x, (length, heads, dh)), (1, 0, 2))

    qh = heads_first(q, lq)
    kh = heads_first(k, lk)
    vh = heads_first(v, lk)
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    if causal:
        scores = ad.add(scores, causal_mask(lq, scores.data.dtype))
    weights = ad.softmax(scores, axis=-1)
    context = ad.matmul(weights, vh)
    merged = ad.reshape(ad.transpose(context, (1, 0, 2)), (lq, d))
    return ad.linear(merged, params[f"{prefix}wo"], params[f"{prefix}bo"])


def _ffn(params, prefix, x):
    hidden = ad.relu(ad.linear(x, params[f"{prefix}_w1"], params[f"{prefix}_b1"]))
    return ad.linear(hidden, params[f"{prefix}_w2"], params[f"{prefix}_b2"])


def _encoder_block(params, i, x, config, train, rng):
    p = config.dropout
    pre = ad.layer_norm(x, params[f"enc{i}.att_norm_g"], params[f"enc{i}.att_norm_b"])
    att = _attention(params, f"enc{i}.", pre, config=config)
    x = ad.add(x, ad.dropout(att, p, rng, train))
    pre = ad.layer_norm(x, params[f"enc{i}.ffn_norm_g"], params[f"enc{i}.ffn_norm_b"])
    return ad.add(x, ad.dropout(_ffn(params, f"enc{i}.ffn", pre), p, rng, train))


@dataclass
class EncoderOutput:
    hidden_mid: ad.DiffTensor
    hidden_top: ad.DiffTensor | None
    length: int


def frontend(features, params, config, train=False, rng=None):
    """Conv subsampling to (ceil(T/4), d_model) plus positional encoding."""
    T, F = features.shape
    if F != config.feat_dim:
        raise InputError(f"feature dim {F} != configured {config.feat_dim}")
    if T < 4:
        raise InputError(f"{T} frames too short to survive 4x downsampling")
    dtype = params["conv.w1"].data.dtype
    x = ad.DiffTensor(np.asarray(features, dtype=dtype).reshape(1, T, F))
    x = ad.relu(ad.conv2d(x, params["conv.w1"], params["conv.b1"]))
    x = ad.relu(ad.conv2d(x, params["conv.w2"], params["conv.b2"]))
    channels, length, freq = x.data.shape
    x = ad.reshape(ad.transpose(x, (1, 0, 2)), (length, channels * freq))
    x = ad.linear(x, params["conv.proj_w"], params["conv.proj_b"])
    x = ad.scale(x, math.sqrt(config.d_model))
    x = ad.add(x, positional_encoding(length, config.d_model, dtype)[:length])
    return ad.dropout(x, config.dropout, rng, train), length


def encode(features, params, config, depth=None, train=False, rng=None):
    """Run the encoder; depth is the tap layer (transcription phases) or
    the full stack.  Both taps come from the same forward pass."""
    depth = config.n_enc if depth is None else depth
    if depth not in (config.tap, config.n_enc):
        raise InputError(f"encoder depth must be {config.tap} or {config.n_enc}")
    x, length = frontend(features, params, config, train, rng)
    hidden_mid = None
    for i in range(depth):
        x = _encoder_block(params, i, x, config, train, rng)
        if i == config.tap - 1:
            hidden_mid = ad.layer_norm(x, params["enc_norm_mid.g"], params["enc_norm_mid.b"])
    hidden_top = None
    if depth == config.n_enc:
        hidden_top = ad.layer_norm(x, params["enc_norm_top.g"], params["enc_norm_top.b"])
    return EncoderOutput(hidden_mid=hidden_mid, hidden_top=hidden_top, length=length)


def ctc_logits(enc_hidden, params):
    return ad.linear(enc_hidden, params["ctc.w"], params["ctc.b"])


def recon_predictions(enc_hidden, params, num_frames):
    """Upsample hidden states back to per-frame feature predictions: each
    hidden position predicts its 4 source frames; the tail is cropped."""
    out = ad.linear(enc_hidden, params["recon.w"], params["recon.b"])
    length = out.data.shape[0]
    feat_dim = out.data.shape[1] // 4
    frames = ad.reshape(out, (length * 4, feat_dim))
    return _crop_rows(frames, num_frames)


def _crop_rows(x, n):
    # slice the first n rows of a 2-D node
    out = ad.DiffTensor(x.data[:n], (x,))

    def backward_fn(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[:n] += g

    out._backward_fn = backward_fn
    return out


def decoder_logits(memory, prefix_ids, params, config, which="st", train=False, rng=None):
    """Per-position output logits for a [BOS]-led prefix (teacher forcing)."""
    vocab = config.tgt_vocab if which == "st" else config.src_vocab
    name = "dec_st" if which == "st" else "dec_asr"
    ids = [int(t) for t in prefix_ids]
    if not ids or ids[0] != BOS_ID:
        raise InputError("decoder prefix must begin with the start-of-sentence id")
    if any(t < 0 or t >= vocab for t in ids):
        raise InputError(f"token id out of vocabulary (size {vocab})")
    dtype = params[f"{name}.emb"].data.dtype
    p = config.dropout
    x = ad.embedding_lookup(params[f"{name}.emb"], ids)
    x = ad.scale(x, math.sqrt(config.d_model))
    x = ad.add(x, positional_encoding(len(ids), config.d_model, dtype))
    x = ad.dropout(x, p, rng, train)
    for i in range(config.n_dec):
        blk = f"{name}.blk{i}"
        pre = ad.layer_norm(x, params[f"{blk}.self.att_norm_g"], params[f"{blk}.self.att_norm_b"])
        x = ad.add(x, ad.dropout(
            _attention(params, f"{blk}.self.", pre, causal=True, config=config), p, rng, train))
        pre = ad.layer_norm(x, params[f"{blk}.cross_norm_g"], params[f"{blk}.cross_norm_b"])
        x = ad.add(x, ad.dropout(
            _attention(params, f"{blk}.cross_", pre, keys_from=memory, config=config), p, rng, train))
        pre = ad.layer_norm(x, params[f"{blk}.self.ffn_norm_g"], params[f"{blk}.self.ffn_norm_b"])
        x = ad.add(x, ad.dropout(_ffn(params, f"{blk}.self.ffn", pre), p, rng, train))
    x = ad.layer_norm(x, params[f"{name}.norm_g"], params[f"{name}.norm_b"])
    return ad.linear(x, params[f"{name}.out_w"], params[f"{name}.out_b"])


def decode_forward(memory, prefix_ids, params, config, which="st"):
    """Per-position probability distributions for a target prefix."""
    return ad.softmax(decoder_logits(memory, prefix_ids, params, config, which), axis=-1)


# ---------------------------------------------------------------------------
# beam search


def beam_decode(features, params, config, beam=10, length_penalty=0.2,
                max_len=None, which="st"):
    """Highest-scoring finished hypothesis under logP + penalty * length.

    Length counts generated tokens including the end-of-sentence token.
    Hypotheses reaching ``max_len`` are force-finished.  Ties break by
    token-id sequence, so beam(1) equals greedy argmax decoding.
    """
    if beam < 1:
        raise InputError("beam size must be >= 1")
    if max_len is None:
        max_len = config.max_len
    enc = encode(features, params, config, depth=None)
    memory = enc.hidden_top
    alive = [((BOS_ID,), 0.0)]
    finished = []
    for _ in range(max_len):
        candidates = []
        for ids, logp in alive:
            probs = decode_forward(memory, list(ids), params, config, which)
            row = np.log(np.maximum(probs.data[-1], 1e-300))
            for token in range(row.shape[0]):
                candidates.append((ids + (token,), logp + float(row[token])))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        alive = []
        for ids, logp in candidates[:beam]:
            if ids[-1] == EOS_ID:
                generated = len(ids) - 1
                finished.append((ids, logp + length_penalty * generated))
            else:
                alive.append((ids, logp))
        if not alive:
            break
    for ids, logp in alive:
        generated = len(ids) - 1
        finished.append((ids, logp + length_penalty * generated))
    finished.sort(key=lambda c: (-c[1], c[0]))
    best = finished[0][0][1:]
    if best and best[-1] == EOS_ID:
        best = best[:-1]
    return list(best)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params):
    """Checkpoint = JSON header (config, dtype, tensor names) + tensors."""
    names = params.names()
    dtype = params.tensors[names[0]].data.dtype
    header = json.dumps(
        {"config": params.config.to_dict(), "dtype": np.dtype(dtype).name, "names": names},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in names:
            write_tensor(fh, params.tensors[name].data)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        dtype = np.dtype(header["dtype"])
        tensors = {}
        for name in header["names"]:
            tensors[name] = ad.DiffTensor(read_tensor(fh).astype(dtype, copy=False))
    return ModelParams(config, tensors)
