"""Encoder-decoder transformer over flattened semantic-ID streams.

The encoder reads ``[c_{1,1} .. c_{1,L}, ..., c_{T,1} .. c_{T,L}]`` with TAE
added to its input embeddings and TRE + bucketed-distance bias in every
self-attention layer.  The decoder generates the L tokens of the next item;
step t only scores the layer-t slice of the (disjoint, per-layer) vocabulary.
"""

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encodings as enc
from . import numerics as nx
from ._kernels import num_slots


@dataclass
class ModelConfig:
    vocab_sizes: list
    d: int = 32
    heads: int = 4
    layers: int = 2
    mlp_width: int = 128
    dropout: float = 0.1
    max_items: int = 20
    num_buckets: int = 32
    max_distance: int = 128
    encoding: enc.EncodingConfig = field(default_factory=enc.EncodingConfig)

    def __post_init__(self):
        if isinstance(self.encoding, dict):
            self.encoding = enc.EncodingConfig(**self.encoding)
        self.vocab_sizes = [int(v) for v in self.vocab_sizes]
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")

    @property
    def L(self):
        return len(self.vocab_sizes)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def full_scale(cls, vocab_sizes, **kw):
        """Full-size backbone (d=128, 6 heads, 4+4 layers, MLP 1024)."""
        base = dict(d=128, heads=6, layers=4, mlp_width=1024, dropout=0.1)
        base.update(kw)
        # 128 is not divisible by 6; round the model width up to the next multiple
        base["d"] = int(math.ceil(base["d"] / base["heads"]) * base["heads"])
        return cls(vocab_sizes, **base)


@dataclass
class Batch:
    tokens: np.ndarray      # (B, T*L) encoder token ids
    key_mask: np.ndarray    # (B, T*L) True on real tokens
    items: np.ndarray       # (B, T) item indices, -1 on padding
    lengths: np.ndarray     # (B,)
    slots: np.ndarray       # (B, T*L, T*L) TRE slot ids
    targets: np.ndarray     # (B, L) target codes (may be None at inference)

    def __len__(self):
        return len(self.lengths)


def layer_offsets(vocab_sizes):
    return np.concatenate([[0], np.cumsum(vocab_sizes)[:-1]]).astype(np.int64)


def make_batch(histories, targets, trie, config):
    """Right-pad item histories (already truncated) into a Batch."""
    L = config.L
    if any(len(h) == 0 for h in histories):
        raise ValueError("empty history")
    histories = [list(h)[-config.max_items:] for h in histories]
    B = len(histories)
    T = max(len(h) for h in histories)
    items = np.full((B, T), -1, dtype=np.int64)
    for b, h in enumerate(histories):
        items[b, :len(h)] = h
    lengths = np.array([len(h) for h in histories], dtype=np.int64)
    if items.max() >= trie.n_items:
        raise ValueError("history contains unknown items")
    off = layer_offsets(config.vocab_sizes)
    pad = int(sum(config.vocab_sizes))
    toks = trie.codes[np.maximum(items, 0)] + off                       # B, T, L
    real = items >= 0
    toks[~real] = pad
    slots = trie.batch_feature_index(items, lengths)
    tgt = None if targets is None else trie.codes[np.asarray(targets, dtype=np.int64)]
    return Batch(toks.reshape(B, T * L), np.repeat(real, L, axis=1), items, lengths,
                 slots, tgt)


def _rng_for(seed, name):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class TrieRecModel:
    def __init__(self, config, trie, seed=0, dtype=np.float32):
        self.config = config
        self.trie = trie
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.cache_bias = True
        self.training = False
        self.dropout_rng = np.random.default_rng([seed, 1])
        if trie.L != config.L:
            raise ValueError("trie depth does not match config.vocab_sizes")
        self.offsets = layer_offsets(config.vocab_sizes)
        self.pad_id = int(sum(config.vocab_sizes))
        self.bos_id = self.pad_id + 1
        self.path_tokens = trie.codes + self.offsets
        self.params = {}
        self._init_params()

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def _new(self, name, shape, kind):
        rng = _rng_for(self.seed, name)
        if kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        elif kind == "emb":
            data = rng.normal(0.0, 1.0, shape)
        elif kind == "small":
            data = rng.normal(0.0, 0.02, shape)
        else:  # fan-in scaled
            fan_in = shape[-2] if len(shape) >= 2 else shape[0]
            data = rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)
        self.params[name] = nx.Tensor(data.astype(self.dtype), requires_grad=True, name=name)

    def _init_params(self):
        c = self.config
        d, H, m = c.d, c.heads, c.mlp_width
        self._new("tok.emb", (self.pad_id + 2, d), "emb")
        self._new("enc.rel_bias", (H, c.num_buckets), "zeros")
        self._new("dec.rel_bias", (H, c.num_buckets), "zeros")
        for prefix, n_attn in (("enc", 1), ("dec", 2)):
            for i in range(c.layers):
                p = f"{prefix}.{i}"
                blocks = ["self"] if n_attn == 1 else ["self", "cross"]
                for j, blk in enumerate(blocks):
                    self._new(f"{p}.ln{j + 1}.g", (d,), "ones")
                    self._new(f"{p}.ln{j + 1}.b", (d,), "zeros")
                    for w in "qkvo":
                        self._new(f"{p}.{blk}.{w}", (d, d), "fan_in")
                k = n_attn + 1
                self._new(f"{p}.ln{k}.g", (d,), "ones")
                self._new(f"{p}.ln{k}.b", (d,), "zeros")
                self._new(f"{p}.ffn.w1", (d, m), "fan_in")
                self._new(f"{p}.ffn.b1", (m,), "zeros")
                self._new(f"{p}.ffn.w2", (m, d), "fan_in")
                self._new(f"{p}.ffn.b2", (d,), "zeros")
            self._new(f"{prefix}.ln.g", (d,), "ones")
            self._new(f"{prefix}.ln.b", (d,), "zeros")
        self._new("head.w", (d, self.pad_id), "fan_in")
        for name, shape in enc.tae_param_shapes(c.L, d).items():
            kind = "zeros" if name.startswith("tae.proj") or name.endswith(".b") else \
                "ones" if name == "tae.ln.g" else "fan_in"
            self._new(name, shape, kind)
        self._new("tre.bias", (H, num_slots(c.L)), "zeros")

    def trainable(self):
        """Parameters on some path to the loss under the current config."""
        e = self.config.encoding
        out = {}
        for name, p in self.params.items():
            if name.startswith("tae.") and e.tae_mode == "off":
                continue
            if name.startswith("tae.mlp") or name.startswith("tae.ln"):
                if e.tae_mode == "prefix":
                    continue
            if name == "tre.bias" and e.tre_mode == "off":
                continue
            if name.endswith("rel_bias") and not e.keep_baseline_bias:
                continue
            out[name] = p
        return out

    def randomize(self, scale=0.5, seed=None):
        """Add Gaussian noise to every tensor so zero-initialised blocks are
        exercised (gradient checks, property tests).  The TRE sentinel stays 0."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        for name, p in self.params.items():
            p.data[...] = p.data + rng.normal(0.0, scale, p.shape).astype(self.dtype)
        slots = self.params["tre.bias"]
        slots.data[:, -1] = 0.0

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, tensors):
        for k, v in tensors.items():
            if k not in self.params:
                raise KeyError(f"unexpected tensor {k!r}")
            if self.params[k].shape != v.shape:
                raise nx.ShapeError(f"{k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data[...] = v

    # ------------------------------------------------------------------
    # building blocks
    # ------------------------------------------------------------------

    def _drop(self, x):
        return nx.dropout(x, self.config.dropout, self.dropout_rng, self.training)

    def attention(self, x_q, x_kv, prefix, bias=None, mask=None):
        """softmax(QK^T / sqrt(d_head) + bias, masked) V, then output projection.

        bias broadcasts to (B, H, Nq, Nk); mask (bool) to the same shape,
        True where attention is allowed.
        """
        P = self.params
        H = self.config.heads
        B, Nq, d = x_q.shape
        Nk = x_kv.shape[1]
        dh = d // H
        q = nx.matmul(x_q, P[prefix + ".q"]).reshape(B, Nq, H, dh).transpose(0, 2, 1, 3)
        k = nx.matmul(x_kv, P[prefix + ".k"]).reshape(B, Nk, H, dh).transpose(0, 2, 3, 1)
        v = nx.matmul(x_kv, P[prefix + ".v"]).reshape(B, Nk, H, dh).transpose(0, 2, 1, 3)
        s = nx.mul(nx.matmul(q, k), 1.0 / math.sqrt(dh))
        if bias is not None:
            s = s + bias
        a = nx.masked_softmax(s, mask)
        o = nx.matmul(a, v).transpose(0, 2, 1, 3).reshape(B, Nq, d)
        return nx.matmul(o, P[prefix + ".o"])

    def _ln(self, x, name):
        return nx.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _ffn(self, x, p):
        P = self.params
        h = nx.gelu(nx.matmul(x, P[p + ".ffn.w1"]) + P[p + ".ffn.b1"])
        return nx.matmul(h, P[p + ".ffn.w2"]) + P[p + ".ffn.b2"]

    def encoder_bias(self, batch):
        """Additive encoder self-attention bias (shared by every layer)."""
        e = self.config.encoding
        N = batch.tokens.shape[1]
        bias = None
        if e.keep_baseline_bias:
            bias = enc.baseline_relative_bias(self.params["enc.rel_bias"], N, N, True,
                                              self.config.max_distance)
        if e.tre_mode != "off":
            slots = batch.slots
            if not self.cache_bias:
                slots = self.trie.batch_feature_index(batch.items, batch.lengths)
            tre = enc.tre_bias(slots, self.params["tre.bias"], self.config.L, e.tre_mode)
            bias = tre if bias is None else bias + tre
        return bias

    def embed_stream(self, batch):
        e = self.config.encoding
        x = nx.embedding(self.params["tok.emb"], batch.tokens)
        return enc.apply_tae(x, batch.items, batch.lengths, self.params["tok.emb"],
                             self.path_tokens, self.params, e.tae_mode)

    def encode(self, batch):
        """Encoder hidden states (B, T*L, d)."""
        if batch.tokens.size and batch.tokens.max() > self.pad_id:
            raise ValueError("unknown token id")
        x = self.embed_stream(batch)
        mask = batch.key_mask[:, None, None, :]
        bias = self.encoder_bias(batch)
        for i in range(self.config.layers):
            p = f"enc.{i}"
            if not self.cache_bias:
                bias = self.encoder_bias(batch)
            h = self._ln(x, p + ".ln1")
            x = x + self._drop(self.attention(h, h, p + ".self", bias, mask))
            x = x + self._drop(self._ffn(self._ln(x, p + ".ln2"), p))
        return self._ln(x, "enc.ln")

    def decode(self, dec_tokens, memory, key_mask):
        """Decoder hidden states for input tokens (R, t); memory (R, N, d)."""
        R, t = dec_tokens.shape
        x = nx.embedding(self.params["tok.emb"], dec_tokens)
        causal = np.tril(np.ones((t, t), dtype=bool))[None, None]
        self_bias = None
        if self.config.encoding.keep_baseline_bias:
            self_bias = enc.baseline_relative_bias(self.params["dec.rel_bias"], t, t, False,
                                                   self.config.max_distance)
        cross_mask = key_mask[:, None, None, :]
        for i in range(self.config.layers):
            p = f"dec.{i}"
            h = self._ln(x, p + ".ln1")
            x = x + self._drop(self.attention(h, h, p + ".self", self_bias, causal))
            h = self._ln(x, p + ".ln2")
            x = x + self._drop(self.attention(h, memory, p + ".cross", None, cross_mask))
            x = x + self._drop(self._ffn(self._ln(x, p + ".ln3"), p))
        return self._ln(x, "dec.ln")

    def step_logits(self, hidden_t, step):
        """Logits over the layer-``step`` vocabulary slice from (R, d) states."""
        lo = int(self.offsets[step])
        hi = lo + self.config.vocab_sizes[step]
        w = nx.getitem(self.params["head.w"], (slice(None), slice(lo, hi)))
        return nx.matmul(hidden_t, w)

    def decoder_inputs(self, codes):
        """[BOS, y_1, ..., y_{t}] token ids for target prefixes (R, t)."""
        codes = np.asarray(codes, dtype=np.int64)
        R, t = codes.shape
        toks = np.empty((R, t + 1), dtype=np.int64)
        toks[:, 0] = self.bos_id
        toks[:, 1:] = codes + self.offsets[:t]
        return toks

    # ------------------------------------------------------------------
    # training objective
    # ------------------------------------------------------------------

    def teacher_forced_logits(self, batch, memory=None):
        if memory is None:
            memory = self.encode(batch)
        L = self.config.L
        h = self.decode(self.decoder_inputs(batch.targets[:, :L - 1]), memory, batch.key_mask)
        return [self.step_logits(nx.getitem(h, (slice(None), t)), t) for t in range(L)]

    def loss(self, batch):
        """Mean next-item token cross-entropy: -(1/L) log P(y|X), batch-averaged."""
        L = self.config.L
        total = None
        for t, logits in enumerate(self.teacher_forced_logits(batch)):
            ce = nx.cross_entropy(logits, batch.targets[:, t], reduction="sum")
            total = ce if total is None else total + ce
        return nx.mul(total, 1.0 / (len(batch) * L))

    # ------------------------------------------------------------------
    # inference protocol used by decoding
    # ------------------------------------------------------------------

    def next_token_logits(self, prefix_codes, memory, key_mask):
        """Logits for step len(prefix) given target prefixes (R, t), t < L."""
        t = np.shape(prefix_codes)[1]
        if t >= self.config.L:
            raise ValueError("prefix too long")
        h = self.decode(self.decoder_inputs(prefix_codes), memory, key_mask)
        return self.step_logits(nx.getitem(h, (slice(None), t)), t)

    def start(self, histories):
        with nx.no_grad():
            batch = make_batch(histories, None, self.trie, self.config)
            memory = self.encode(batch)
        return {"memory": memory.data, "key_mask": batch.key_mask}

    def step_log_probs(self, state, rows, prefix_codes):
        """Log-probabilities (R, V_t) for decoder prefixes belonging to users ``rows``."""
        with nx.no_grad():
            memory = nx.Tensor(state["memory"][rows])
            logits = self.next_token_logits(prefix_codes, memory, state["key_mask"][rows])
        return nx.log_softmax_np(logits.data.astype(np.float64))

    def path_log_probs(self, state, rows, codes):
        """Teacher-forced (R, L) log-probabilities of complete code paths."""
        codes = np.asarray(codes, dtype=np.int64)
        L = self.config.L
        with nx.no_grad():
            memory = nx.Tensor(state["memory"][rows])
            h = self.decode(self.decoder_inputs(codes[:, :L - 1]), memory,
                            state["key_mask"][rows])
            out = np.empty(codes.shape)
            for t in range(L):
                logits = self.step_logits(nx.getitem(h, (slice(None), t)), t)
                lp = nx.log_softmax_np(logits.data.astype(np.float64))
                out[:, t] = lp[np.arange(len(codes)), codes[:, t]]
        return out
