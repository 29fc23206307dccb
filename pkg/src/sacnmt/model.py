"""GRU encoder / conditional-GRU attention decoder used for the policy and the critics.

Shapes are batch-first. Source and target id arrays are right-padded with
PAD. The target embedding table doubles as the output projection.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_arrays, save_arrays
from .vocab import BOS, EOS, PAD

NEG_INF = -1e9


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    emb_dim: int = 200
    hidden_dim: int = 320
    att_dim: int | None = None
    mask_special_outputs: bool = True   # policy: never emit PAD/BOS; critics keep raw outputs
    output_scale: float = 1.0           # constant multiplier on the outputs (critics: reward scale)

    @property
    def attention_dim(self) -> int:
        return self.att_dim or self.hidden_dim


def max_decode_len(src_len):
    """Decoding budget per sentence: twice the source length plus five."""
    return 2 * np.asarray(src_len) + 5


@dataclass
class EncoderStates:
    states: Tensor          # (B, S, H) top-layer outputs
    keys: Tensor            # (B, S, A) attention keys
    mask: np.ndarray        # (B, S) 1.0 on real tokens
    lengths: np.ndarray     # (B,)
    att_bias: np.ndarray = field(init=False)

    def __post_init__(self):
        self.att_bias = np.where(self.mask > 0, 0.0, NEG_INF)

    @property
    def max_len(self) -> np.ndarray:
        return max_decode_len(self.lengths)


@dataclass
class DecoderState:
    enc: EncoderStates
    hidden: list[Tensor]    # per decoder layer, (B, H)
    t: int = 0


@dataclass
class Sample:
    tokens: list[list[int]]         # emitted ids per row (EOS included when produced)
    log_probs: list[np.ndarray]     # log-probability of each emitted id
    entropies: list[np.ndarray]     # entropy of the sampling distribution at each step


class Seq2Seq:
    """2-layer GRU encoder, 2-layer conditional-GRU decoder with additive attention."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        E, H, A = config.emb_dim, config.hidden_dim, config.attention_dim
        shapes: dict[str, tuple[int, ...]] = {
            "src_emb": (config.src_vocab_size, E),
            "tgt_emb": (config.tgt_vocab_size, E),
            "init0_W": (H, H), "init0_b": (H,),
            "init1_W": (H, H), "init1_b": (H,),
            "att_Wq": (H, A), "att_Uk": (H, A), "att_v": (A,),
            "out_W": (2 * H + E, E), "out_b": (E,), "out_bias": (config.tgt_vocab_size,),
        }
        for name, n_in in (("enc0", E), ("enc1", H), ("dec_a", E), ("dec_b", H), ("dec2", 2 * H)):
            shapes.update({f"{name}_W": (n_in, 3 * H), f"{name}_Uzr": (H, 2 * H),
                           f"{name}_Uh": (H, H), f"{name}_b": (3 * H,)})
        self.params: dict[str, Tensor] = {}
        for name in sorted(shapes):
            shape = shapes[name]
            if len(shape) == 1:
                data = np.zeros(shape)
            elif name.endswith("_Uzr"):
                data = np.concatenate([ad.xavier_uniform(rng, (H, H)) for _ in range(2)], axis=1)
            elif name.endswith("_W") and name.startswith(("enc", "dec")):
                data = np.concatenate([ad.xavier_uniform(rng, (shape[0], H)) for _ in range(3)], axis=1)
            else:
                data = ad.xavier_uniform(rng, shape)
            self.params[name] = Tensor(data, requires_grad=True, name=name)
        self._out_mask = np.zeros(config.tgt_vocab_size)
        if config.mask_special_outputs:
            self._out_mask[[PAD, BOS]] = NEG_INF

    # --- parameter bookkeeping --------------------------------------------

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k!r}")
            if state[k].shape != p.shape:
                raise ValueError(f"parameter {k!r}: expected shape {p.shape}, got {state[k].shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def clone(self) -> Seq2Seq:
        other = copy.copy(self)
        other.params = {k: Tensor(p.data.copy(), requires_grad=True, name=k) for k, p in self.params.items()}
        return other

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        save_arrays(path, self.state_dict(), {"model_config": asdict(self.config), **(extra_meta or {})})

    @classmethod
    def load(cls, path: str | Path) -> tuple[Seq2Seq, dict]:
        arrays, meta = load_arrays(path)
        model = cls(ModelConfig(**meta["model_config"]))
        model.load_state_dict(arrays)
        return model, meta

    def _gru(self, prefix: str, x: Tensor, h: Tensor) -> Tensor:
        p = self.params
        return ad.gru_cell(x, h, p[f"{prefix}_W"], p[f"{prefix}_Uzr"], p[f"{prefix}_Uh"], p[f"{prefix}_b"])

    # --- encoder / decoder ------------------------------------------------

    def encode(self, src: np.ndarray) -> EncoderStates:
        """Encode right-padded source ids (B, S) into one state per position."""
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        if src.shape[1] == 0:
            raise ValueError("empty source sentence")
        if src.min() < 0 or src.max() >= self.config.src_vocab_size:
            raise ValueError(f"source id outside vocabulary of size {self.config.src_vocab_size}")
        mask = (src != PAD).astype(np.float64)
        lengths = mask.sum(axis=1).astype(np.int64)
        if np.any(lengths == 0):
            raise ValueError("empty source sentence")
        B, S = src.shape
        H = self.config.hidden_dim
        emb = ad.embedding(self.params["src_emb"], src)
        layer_in = [emb[:, t] for t in range(S)]
        for layer in ("enc0", "enc1"):
            h = Tensor(np.zeros((B, H)))
            outputs = []
            for t in range(S):
                h_new = self._gru(layer, layer_in[t], h)
                m = mask[:, t:t + 1]
                h = h_new if m.all() else h + m * (h_new - h)
                outputs.append(h)
            layer_in = outputs
        states = ad.stack(layer_in, axis=1)
        keys = states @ self.params["att_Uk"]
        return EncoderStates(states, keys, mask, lengths)

    def init_state(self, enc: EncoderStates) -> DecoderState:
        pooled = ad.sum(enc.states * enc.mask[:, :, None], axis=1) * (1.0 / enc.lengths[:, None])
        p = self.params
        hidden = [ad.tanh(pooled @ p[f"init{i}_W"] + p[f"init{i}_b"]) for i in range(2)]
        return DecoderState(enc, hidden, 0)

    def decode_step(self, state: DecoderState, prev_tokens, bounded: bool = True,
                    ) -> tuple[Tensor, DecoderState, Tensor]:
        """Advance one step; returns (logits (B, V), next state, attention weights (B, S)).

        Free-running decoding is bounded by the source-dependent budget;
        teacher forcing passes ``bounded=False`` since its inputs fix the length.
        """
        if bounded and state.t >= int(state.enc.max_len.max()):
            raise ValueError(f"decoding past the maximum length {int(state.enc.max_len.max())}")
        p = self.params
        enc = state.enc
        y = ad.embedding(p["tgt_emb"], np.asarray(prev_tokens, dtype=np.int64))
        h1 = self._gru("dec_a", y, state.hidden[0])
        query = h1 @ p["att_Wq"]
        B, S, A = enc.keys.shape
        scores = ad.tanh(enc.keys + ad.reshape(query, (B, 1, A))) @ p["att_v"] + enc.att_bias
        att = ad.softmax(scores, axis=-1)
        ctx = ad.sum(enc.states * ad.reshape(att, (B, S, 1)), axis=1)
        h1 = self._gru("dec_b", ctx, h1)
        h2 = self._gru("dec2", ad.concat([h1, ctx], axis=-1), state.hidden[1])
        readout = ad.tanh(ad.concat([h2, ctx, y], axis=-1) @ p["out_W"] + p["out_b"])
        logits = readout @ ad.transpose(p["tgt_emb"]) + p["out_bias"]
        if self.config.output_scale != 1.0:
            logits = logits * self.config.output_scale
        logits = logits + self._out_mask
        return logits, DecoderState(enc, [h1, h2], state.t + 1), att

    def teacher_force(self, src: np.ndarray, dec_inputs: np.ndarray, enc: EncoderStates | None = None) -> Tensor:
        """Outputs (B, L, V) for decoder input ids (B, L); position i sees inputs[:, :i+1]."""
        enc = enc if enc is not None else self.encode(src)
        state = self.init_state(enc)
        outs = []
        for t in range(dec_inputs.shape[1]):
            logits, state, _ = self.decode_step(state, dec_inputs[:, t], bounded=False)
            outs.append(logits)
        return ad.stack(outs, axis=1)

    def outputs_at(self, src: np.ndarray, prefixes: list[list[int]]) -> Tensor:
        """Outputs (B, V) for the states reached after BOS + each prefix."""
        lengths = np.array([len(pf) for pf in prefixes])
        inputs = np.full((len(prefixes), lengths.max() + 1), PAD, dtype=np.int64)
        inputs[:, 0] = BOS
        for i, pf in enumerate(prefixes):
            inputs[i, 1:len(pf) + 1] = pf
        out = self.teacher_force(src, inputs)
        return out[np.arange(len(prefixes)), lengths]

    # --- objectives and decoding ---------------------------------------------

    def mle_loss(self, src: np.ndarray, tgt: np.ndarray) -> Tensor:
        """Mean negative log-likelihood per non-PAD target token (teacher forcing).

        ``tgt`` holds references followed by EOS, right-padded with PAD.
        """
        tgt = np.asarray(tgt, dtype=np.int64)
        if tgt.size == 0:
            raise ValueError("empty batch")
        inputs = np.concatenate([np.full((tgt.shape[0], 1), BOS), tgt[:, :-1]], axis=1)
        logp = ad.log_softmax(self.teacher_force(src, inputs), axis=-1)
        picked = ad.gather(logp, tgt)
        mask = (tgt != PAD).astype(np.float64)
        return -ad.sum(picked * mask) * (1.0 / mask.sum())

    def sequence_log_prob(self, src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
        """Sum of teacher-forced log-probabilities per row (PAD excluded)."""
        with ad.no_grad():
            inputs = np.concatenate([np.full((tgt.shape[0], 1), BOS), tgt[:, :-1]], axis=1)
            logp = ad.log_softmax(self.teacher_force(src, inputs), axis=-1).data
        picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
        return (picked * (tgt != PAD)).sum(axis=1)

    def _decode(self, src: np.ndarray, choose) -> Sample:
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        with ad.no_grad():
            enc = self.encode(src)
            state = self.init_state(enc)
            B = src.shape[0]
            max_len = enc.max_len
            tokens: list[list[int]] = [[] for _ in range(B)]
            logps: list[list[float]] = [[] for _ in range(B)]
            ents: list[list[float]] = [[] for _ in range(B)]
            alive = np.ones(B, dtype=bool)
            prev = np.full(B, BOS, dtype=np.int64)
            for t in range(int(max_len.max())):
                logits, state, _ = self.decode_step(state, prev)
                logp = ad.log_softmax(logits, axis=-1).data
                nxt, step_logp = choose(t, logits.data, logp)
                probs = np.exp(step_logp)
                ent = -(probs * step_logp).sum(axis=-1)
                for i in np.flatnonzero(alive):
                    tokens[i].append(int(nxt[i]))
                    logps[i].append(float(step_logp[i, nxt[i]]))
                    ents[i].append(float(ent[i]))
                alive &= (nxt != EOS) & (t + 1 < max_len)
                if not alive.any():
                    break
                prev = nxt
        return Sample(tokens, [np.array(x) for x in logps], [np.array(x) for x in ents])

    def sample(self, src: np.ndarray, rng: np.random.Generator, temperature: float = 1.0) -> Sample:
        """Ancestral sampling to EOS or the length budget.

        Uniform draws are taken up-front for the whole budget so two models fed
        the same generator consume identical random streams.
        """
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        budget = int(max_decode_len((src != PAD).sum(axis=1)).max())
        uniforms = 1.0 - rng.random((budget, src.shape[0]))  # in (0, 1]

        def choose(t, logits, logp):
            if temperature != 1.0:
                logp = logits / temperature
                logp = logp - logp.max(axis=-1, keepdims=True)
                logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
            cdf = np.cumsum(np.exp(logp), axis=-1)
            idx = (cdf < uniforms[t][:, None] * cdf[:, -1:]).sum(axis=-1)
            return np.minimum(idx, logp.shape[-1] - 1), logp

        return self._decode(src, choose)

    def greedy(self, src: np.ndarray) -> Sample:
        return self._decode(src, lambda t, logits, logp: (logits.argmax(axis=-1), logp))

    def greedy_decode(self, src: np.ndarray) -> list[list[int]]:
        """Argmax decoding; EOS is stripped from the returned id lists."""
        return [[i for i in toks if i != EOS] for toks in self.greedy(src).tokens]
