"""Learnable components: embeddings, domain encoders, guidance fusion, denoiser.

Parameters live in an ordered ``dict`` of name -> Tensor. Sequences are
batched right-padded; row ``i`` of a sequence carries position ``Pos[i]``.
Encoders are pre-norm Transformer stacks with causal self-attention, the
denoiser decodes a single noisy token against the guidance rows with
cross-attention.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from config import STREAM_INIT, stream
from dataset import N_RESERVED, PAD, Domain, split_domains
from tensor import Tensor, concat, gather_rows, no_grad, parameter, take

VARIANTS = ("diff", "diff+de", "diff+de+g", "diff+de+tricl", "full")
LN_EPS = 1e-5


@dataclass
class ModelConfig:
    n_items_x: int = 0  # table rows incl. MASK and PAD
    n_items_y: int = 0
    d: int = 256
    n_heads: int = 1
    enc_layers: int = 2
    dec_layers: int = 1
    max_seq_len: int = 15
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule: str = "linear"
    mlp_ratio: int = 4
    variant: str = "full"

    def validate(self):
        counts = (self.d, self.n_heads, self.enc_layers, self.dec_layers, self.max_seq_len,
                  self.T, self.mlp_ratio)
        if min(counts) <= 0:
            raise ValueError("Model sizes must be positive")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown variant {self.variant!r}, expected one of {VARIANTS}")

    def validate_vocab(self):
        if min(self.n_items_x, self.n_items_y) <= N_RESERVED:
            raise ValueError("Vocabulary sizes must exceed the reserved rows")

    # variant switches
    @property
    def domain_encoders(self):
        return self.variant != "diff"

    @property
    def fused_guidance(self):
        return self.variant in ("diff+de+g", "full")

    @property
    def fusion(self):
        return self.domain_encoders and (self.fused_guidance or self.contrastive)

    @property
    def merged_encoder(self):
        return not self.fused_guidance

    @property
    def contrastive(self):
        return self.variant in ("diff+de+tricl", "full")


@dataclass
class Model:
    cfg: ModelConfig
    params: OrderedDict
    schedule: object
    trained: bool = False


@dataclass
class SequenceBatch:
    c_items: np.ndarray   # (B, Lc) per-domain item index
    c_is_y: np.ndarray    # (B, Lc) bool
    c_len: np.ndarray     # (B,)
    x_items: np.ndarray   # (B, Lx)
    x_len: np.ndarray
    y_items: np.ndarray   # (B, Ly)
    y_len: np.ndarray
    order: np.ndarray     # (B, Lc) row of [x slots | y slots] for each s_c position

    @property
    def size(self):
        return self.c_items.shape[0]


@dataclass
class GuidanceBundle:
    g_x: object
    g_y: object
    g_d: object
    g_x_last: object
    g_y_last: object
    g_d_pooled: object
    memory: object         # rows the denoiser cross-attends to
    memory_valid: np.ndarray

    def last_for(self, domain):
        return self.g_x_last if domain is Domain.X else self.g_y_last


@dataclass
class DenoiseOutput:
    x0_hat: Tensor
    h_c: Tensor


# ----------------- Batching -----------------
def collate(sequences):
    """Pad a list of UserSequence into index arrays (empty domains get one PAD)."""
    B = len(sequences)
    splits = [split_domains(seq) for seq in sequences]
    Lc = max(1, max(len(s) for s in sequences))
    Lx = max(1, max(len(sx) for sx, _ in splits))
    Ly = max(1, max(len(sy) for _, sy in splits))

    c_items = np.full((B, Lc), PAD, dtype=np.int64)
    c_is_y = np.zeros((B, Lc), dtype=bool)
    x_items = np.full((B, Lx), PAD, dtype=np.int64)
    y_items = np.full((B, Ly), PAD, dtype=np.int64)
    order = np.zeros((B, Lc), dtype=np.int64)
    c_len = np.zeros(B, dtype=np.int64)
    x_len = np.zeros(B, dtype=np.int64)
    y_len = np.zeros(B, dtype=np.int64)

    for b, (seq, (s_x, s_y)) in enumerate(zip(sequences, splits)):
        c_len[b], x_len[b], y_len[b] = len(seq), len(s_x), len(s_y)
        nx = ny = 0
        for j, (item, domain) in enumerate(seq.items):
            c_items[b, j] = item
            if domain is Domain.X:
                order[b, j] = nx
                nx += 1
            else:
                c_is_y[b, j] = True
                order[b, j] = Lx + ny
                ny += 1
        x_items[b, :len(s_x)] = [item for item, _ in s_x.items]
        y_items[b, :len(s_y)] = [item for item, _ in s_y.items]

    return SequenceBatch(c_items, c_is_y, c_len, x_items, x_len, y_items, y_len, order)


def valid_mask(lengths, width):
    return np.arange(width)[None, :] < np.asarray(lengths)[:, None]


def causal_mask(length):
    return np.triu(np.ones((length, length), dtype=bool), k=1)


# ----------------- Building blocks -----------------
def linear(x, w, b):
    return x @ w + b


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred * (var + LN_EPS) ** -0.5 * gain + bias


def mlp(x, params, prefix):
    hidden = linear(x, params[prefix + ".w1"], params[prefix + ".b1"]).gelu()
    return linear(hidden, params[prefix + ".w2"], params[prefix + ".b2"])


def attention(query, memory, params, prefix, n_heads, blocked):
    """Scaled dot-product attention.

    ``blocked`` is a bool array broadcastable to (B, H, Lq, Lk); True keys are
    excluded. A row with every key blocked falls back to uniform weights.
    Returns the projected output and the attention weights.
    """
    B, Lq, d = query.shape
    Lk = memory.shape[1]
    dh = d // n_heads
    q = linear(query, params[prefix + ".wq"], params[prefix + ".bq"])
    k = linear(memory, params[prefix + ".wk"], params[prefix + ".bk"])
    v = linear(memory, params[prefix + ".wv"], params[prefix + ".bv"])
    q = q.reshape(B, Lq, n_heads, dh).transpose(0, 2, 1, 3)
    k = k.reshape(B, Lk, n_heads, dh).transpose(0, 2, 3, 1)
    v = v.reshape(B, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ k) * (1.0 / math.sqrt(dh))
    weights = scores.masked_fill(np.broadcast_to(blocked, scores.shape)).softmax(axis=-1)
    context = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
    return linear(context, params[prefix + ".wo"], params[prefix + ".bo"]), weights


def encoder_stack(h, valid, params, prefix, cfg, causal=True):
    """Pre-norm self-attention + MLP blocks, then a final layer norm."""
    L = h.shape[1]
    blocked = ~valid[:, None, None, :]
    if causal:
        blocked = blocked | causal_mask(L)[None, None, :, :]
    for layer in range(cfg.enc_layers):
        p = f"{prefix}.{layer}"
        normed = layer_norm(h, params[p + ".ln1.g"], params[p + ".ln1.b"])
        attended, _ = attention(normed, normed, params, p + ".attn", cfg.n_heads, blocked)
        h = h + attended
        h = h + mlp(layer_norm(h, params[p + ".ln2.g"], params[p + ".ln2.b"]), params, p + ".mlp")
    return layer_norm(h, params[prefix + ".ln_f.g"], params[prefix + ".ln_f.b"])


def pool_last(h, lengths):
    """Row at the last non-pad position (row 0 for an all-pad sequence)."""
    index = np.maximum(np.asarray(lengths) - 1, 0)[:, None]
    return gather_rows(h, index).reshape(h.shape[0], h.shape[2])


# ----------------- Operations -----------------
def embed_sequence(items, domain, params, cfg):
    """h = E_domain[items] + Pos[:L] for a (B, L) index array of one domain."""
    items = np.asarray(items, dtype=np.int64)
    table = params["E_x"] if domain is Domain.X else params["E_y"]
    if items.size and (items.min() < 0 or items.max() >= table.shape[0]):
        raise ValueError(f"Item index out of range for domain {domain.value} "
                         f"(table has {table.shape[0]} rows)")
    L = items.shape[1]
    if L > cfg.max_seq_len:
        raise ValueError(f"Sequence length {L} exceeds max_seq_len={cfg.max_seq_len}")
    return take(table, items) + params["pos"][:L]


def lookup_items(items, is_y, params):
    """Item rows from E_x or E_y depending on ``is_y``, any index shape."""
    items = np.asarray(items, dtype=np.int64)
    is_y = np.asarray(is_y, dtype=bool)
    for table, chosen in ((params["E_x"], items[~is_y]), (params["E_y"], items[is_y])):
        if chosen.size and (chosen.min() < 0 or chosen.max() >= table.shape[0]):
            raise ValueError(f"Item index out of range (table has {table.shape[0]} rows)")
    weight_y = is_y[..., None].astype(np.float64)
    x_rows = take(params["E_x"], np.where(is_y, PAD, items))
    y_rows = take(params["E_y"], np.where(is_y, items, PAD))
    return x_rows * (1.0 - weight_y) + y_rows * weight_y


def embed_mixed(items, is_y, params, cfg):
    """Embedding for a cross-domain sequence: each row uses its own domain table."""
    L = np.shape(items)[1]
    if L > cfg.max_seq_len:
        raise ValueError(f"Sequence length {L} exceeds max_seq_len={cfg.max_seq_len}")
    return lookup_items(items, is_y, params) + params["pos"][:L]


def encode_domain(h, valid, which, params, cfg):
    """Encoder_x / Encoder_y (``which`` in X, Y) over embedded rows."""
    prefix = "enc_x" if which is Domain.X else "enc_y"
    return encoder_stack(h, valid, params, prefix, cfg, causal=True)


def fuse_guidance(g_x, g_y, order, c_len, params):
    """Interleave encoder rows back into s_c order and project them.

    Returns ``(g_d, g_d_pooled, valid)``.
    """
    rows = gather_rows(concat([g_x, g_y], axis=1), order)
    g_d = linear(rows, params["fuse.w"], params["fuse.b"])
    return g_d, pool_last(g_d, c_len), valid_mask(c_len, order.shape[1])


def encode_guidance(batch, params, cfg):
    """Embed, encode and fuse a batch of observed sequences."""
    c_valid = valid_mask(batch.c_len, batch.c_items.shape[1])
    g_x = g_y = g_d = None
    g_x_last = g_y_last = g_d_pooled = None

    if cfg.domain_encoders:
        h_x = embed_sequence(batch.x_items, Domain.X, params, cfg)
        h_y = embed_sequence(batch.y_items, Domain.Y, params, cfg)
        g_x = encode_domain(h_x, valid_mask(batch.x_len, batch.x_items.shape[1]), Domain.X, params, cfg)
        g_y = encode_domain(h_y, valid_mask(batch.y_len, batch.y_items.shape[1]), Domain.Y, params, cfg)
        g_x_last, g_y_last = pool_last(g_x, batch.x_len), pool_last(g_y, batch.y_len)
    if cfg.fusion:
        g_d, g_d_pooled, _ = fuse_guidance(g_x, g_y, batch.order, batch.c_len, params)

    if cfg.fused_guidance:
        memory, memory_valid = g_d, c_valid
    else:
        h_c = embed_mixed(batch.c_items, batch.c_is_y, params, cfg)
        merged = encoder_stack(h_c, c_valid, params, "enc_m", cfg, causal=True)
        merged_last = pool_last(merged, batch.c_len)
        if cfg.domain_encoders:
            memory = merged_last.reshape(batch.size, 1, cfg.d)
            memory_valid = np.ones((batch.size, 1), dtype=bool)
        else:
            memory, memory_valid = merged, c_valid
            g_x_last = g_y_last = g_d_pooled = merged_last

    return GuidanceBundle(g_x, g_y, g_d, g_x_last, g_y_last, g_d_pooled, memory, memory_valid)


def denoise(x_t, t, guidance, params, cfg):
    """x0_hat = Decoder(Encoder_c(x_t + StepEmb[t]), guidance rows)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t < 1) or np.any(t > cfg.T):
        raise ValueError(f"Timestep out of range [1, {cfg.T}]")
    memory = guidance.memory
    if memory is None or memory.shape[1] == 0:
        raise ValueError("denoise needs at least one guidance row")
    B = memory.shape[0]
    if t.shape[0] == 1 and B > 1:
        t = np.repeat(t, B)

    token = (x_t + take(params["step_emb"], t - 1)).reshape(B, 1, cfg.d)
    h = encoder_stack(token, np.ones((B, 1), dtype=bool), params, "enc_c", cfg, causal=False)

    blocked = ~np.asarray(guidance.memory_valid)[:, None, None, :]
    for layer in range(cfg.dec_layers):
        p = f"dec.{layer}"
        normed = layer_norm(h, params[p + ".ln1.g"], params[p + ".ln1.b"])
        attended, _ = attention(normed, memory, params, p + ".cross", cfg.n_heads, blocked)
        h = h + attended
        h = h + mlp(layer_norm(h, params[p + ".ln2.g"], params[p + ".ln2.b"]), params, p + ".mlp")
    h = layer_norm(h, params["dec.ln_f.g"], params["dec.ln_f.b"])
    x0_hat = linear(h, params["dec.head.w"], params["dec.head.b"]).reshape(B, cfg.d)
    return DenoiseOutput(x0_hat, x0_hat)


def encode_aug(batch, params, cfg):
    """h_aug: Encoder_c over an augmented cross-domain sequence, last real row."""
    h = embed_mixed(batch.c_items, batch.c_is_y, params, cfg)
    encoded = encoder_stack(h, valid_mask(batch.c_len, batch.c_items.shape[1]), params, "enc_c",
                            cfg, causal=True)
    return pool_last(encoded, batch.c_len)


# ----------------- Parameters -----------------
def _block_shapes(prefix, d, hidden, cross=False):
    attn = prefix + (".cross" if cross else ".attn")
    return [
        (prefix + ".ln1.g", (d,)), (prefix + ".ln1.b", (d,)),
        (attn + ".wq", (d, d)), (attn + ".bq", (d,)),
        (attn + ".wk", (d, d)), (attn + ".bk", (d,)),
        (attn + ".wv", (d, d)), (attn + ".bv", (d,)),
        (attn + ".wo", (d, d)), (attn + ".bo", (d,)),
        (prefix + ".ln2.g", (d,)), (prefix + ".ln2.b", (d,)),
        (prefix + ".mlp.w1", (d, hidden)), (prefix + ".mlp.b1", (hidden,)),
        (prefix + ".mlp.w2", (hidden, d)), (prefix + ".mlp.b2", (d,)),
    ]


def _stack_shapes(prefix, layers, d, hidden, cross=False):
    shapes = []
    for layer in range(layers):
        shapes += _block_shapes(f"{prefix}.{layer}", d, hidden, cross)
    return shapes + [(prefix + ".ln_f.g", (d,)), (prefix + ".ln_f.b", (d,))]


def parameter_shapes(cfg):
    d, hidden = cfg.d, cfg.mlp_ratio * cfg.d
    shapes = [
        ("E_x", (cfg.n_items_x, d)),
        ("E_y", (cfg.n_items_y, d)),
        ("pos", (cfg.max_seq_len, d)),
        ("step_emb", (cfg.T, d)),
    ]
    if cfg.domain_encoders:
        shapes += _stack_shapes("enc_x", cfg.enc_layers, d, hidden)
        shapes += _stack_shapes("enc_y", cfg.enc_layers, d, hidden)
    if cfg.fusion:
        shapes += [("fuse.w", (d, d)), ("fuse.b", (d,))]
    if cfg.merged_encoder:
        shapes += _stack_shapes("enc_m", cfg.enc_layers, d, hidden)
    shapes += _stack_shapes("enc_c", cfg.enc_layers, d, hidden)
    shapes += _stack_shapes("dec", cfg.dec_layers, d, hidden, cross=True)
    shapes += [("dec.head.w", (d, d)), ("dec.head.b", (d,))]
    return shapes


def init_parameters(cfg, rng_seed):
    """Embeddings ~ N(0, 0.02^2) with a zero PAD row, Glorot-uniform weights,
    unit layer-norm gains, zero biases, identity fusion projection and a
    small-scale denoiser output head."""
    cfg.validate()
    cfg.validate_vocab()
    rng = stream(rng_seed, STREAM_INIT)
    params = OrderedDict()
    for name, shape in parameter_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if name in ("E_x", "E_y", "pos", "step_emb"):
            value = rng.normal(0.0, 0.02, size=shape)
            if name in ("E_x", "E_y"):
                value[PAD] = 0.0
        elif name == "fuse.w":
            value = np.eye(shape[0])
        elif name == "dec.head.w":
            # x0_hat starts at embedding scale
            value = rng.normal(0.0, 0.02 / math.sqrt(shape[0]), size=shape)
        elif leaf == "g":
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = parameter(value)
    return params


def parameter_count(params):
    return int(sum(p.data.size for p in params.values()))


def snapshot(params):
    return OrderedDict((name, p.data.copy()) for name, p in params.items())


def restore(arrays):
    return OrderedDict((name, parameter(value)) for name, value in arrays.items())


# ----------------- Inference helpers -----------------
def make_denoiser(model):
    """Adapter for ``diffusion.guided_sample``: returns numpy x0 estimates."""
    def denoiser(x_t, guidance, t):
        with no_grad():
            return denoise(Tensor(x_t), t, guidance, model.params, model.cfg).x0_hat.data
    return denoiser
