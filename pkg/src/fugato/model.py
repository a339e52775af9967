"""The compound-token language model.

A causal transformer (the main decoder) produces one hidden vector per
compound token; an interchangeable sub-decoder factorizes each compound
token into sequential sub-token predictions conditioned on that hidden
vector and the already-known sub-tokens of the same token.

Sub-decoder kinds:
- ``parallel``: every feature projected straight from the hidden vector.
- ``ff``: running state updated by concatenating the previous state with
  the last sub-token's embedding through a per-slot linear map.
- ``rnn``: a GRU whose initial hidden state and first input are the main
  decoder's output; later inputs are the sampled sub-tokens' embeddings.
- ``selfattn``: causal self-attention over [hidden, BOS, embeddings...].
- ``crossattn``: the hidden vector (plus a learned per-slot bias) queries
  a growing key/value sequence [BOS, embeddings...].
- ``nmt``: crossattn whose key/value embeddings are first contextualized
  by the embedding enricher, a cross-attention over a window of recent
  main-decoder hidden states.

Prediction follows the next-token convention: a learned sequence-level
BOS vector is prepended, and compound token t is predicted from the
hidden state at input position t (which has seen tokens < t only).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoding import SchemeSpec
from .errors import ConfigError, DataError
from .nn import (
    CrossAttentionBlock,
    Embedding,
    GRUCell,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    TransformerBlock,
    _init,
)
from .vocab import IGNORE_INDEX

SUBDECODER_KINDS = ("parallel", "ff", "rnn", "selfattn", "crossattn", "nmt")


@dataclass
class ModelConfig:
    features: tuple[tuple[str, int], ...]   # (name, vocab size) per slot
    model_dim: int = 512
    heads: int = 8
    main_layers: int = 12
    subdecoder_layers: int = 1
    enricher_layers: int = 1
    enricher_window: int = 16
    max_sequence_length: int = 512
    subdecoder_kind: str = "nmt"
    dropout: float = 0.1
    key_residual: bool = False   # experimental alternative residual placement

    def __post_init__(self):
        self.features = tuple((str(n), int(s)) for n, s in self.features)
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by {self.heads} heads"
            )
        if self.enricher_window < 1:
            raise ConfigError(f"enricher_window must be >= 1, got {self.enricher_window}")
        if self.subdecoder_kind not in SUBDECODER_KINDS:
            raise ConfigError(f"unknown subdecoder kind {self.subdecoder_kind!r}")
        if not self.features:
            raise ConfigError("model needs at least one feature")

    @property
    def width(self) -> int:
        return len(self.features)

    @staticmethod
    def for_scheme(scheme: SchemeSpec, **overrides) -> "ModelConfig":
        """Build a config from a scheme's slot layout.

        Single-slot schemes (the flattened encoding) always use the
        parallel head: with one feature per token there is nothing for a
        sub-decoder to condition on.
        """
        features = tuple(zip(scheme.features, scheme.sizes))
        config = ModelConfig(features=features, **overrides)
        if config.width == 1:
            config.subdecoder_kind = "parallel"
        return config

    def to_dict(self) -> dict:
        return {
            "features": [[n, s] for n, s in self.features],
            "model_dim": self.model_dim,
            "heads": self.heads,
            "main_layers": self.main_layers,
            "subdecoder_layers": self.subdecoder_layers,
            "enricher_layers": self.enricher_layers,
            "enricher_window": self.enricher_window,
            "max_sequence_length": self.max_sequence_length,
            "subdecoder_kind": self.subdecoder_kind,
            "dropout": self.dropout,
            "key_residual": self.key_residual,
        }

    @staticmethod
    def from_dict(obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["features"] = tuple((n, s) for n, s in obj["features"])
        return ModelConfig(**obj)

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


@dataclass
class TeacherForcedLoss:
    """Loss tensor for backward plus detached per-feature accounting."""

    loss: Tensor                       # mean NLL over all scored sub-tokens
    per_feature_nll: dict[str, float]  # summed nats per feature
    per_feature_count: dict[str, int]
    logprobs: np.ndarray | None = None  # [B, T, F] log p of each target

    @property
    def mean(self) -> float:
        total = sum(self.per_feature_nll.values())
        count = sum(self.per_feature_count.values())
        return total / max(count, 1)

    def feature_means(self) -> dict[str, float]:
        return {
            name: self.per_feature_nll[name] / max(self.per_feature_count[name], 1)
            for name in self.per_feature_nll
        }


class CompoundModel(Module):
    """Main decoder + sub-decoder over a fixed slot layout."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        d = config.model_dim
        j = config.width

        self.embeddings = [Embedding(rng, size, d) for _, size in config.features]
        self.positions = Parameter(_init(rng, config.max_sequence_length, d))
        self.sequence_bos = Parameter(_init(rng, d))
        self.blocks = [
            TransformerBlock(rng, d, config.heads, config.dropout)
            for _ in range(config.main_layers)
        ]
        self.final_norm = LayerNorm(d)
        self.heads_out = [Linear(rng, d, size) for _, size in config.features]

        kind = config.subdecoder_kind
        if kind == "ff":
            self.ff_maps = [Linear(rng, 2 * d, d) for _ in range(j - 1)]
        elif kind == "rnn":
            self.gru = GRUCell(rng, d, d)
        elif kind == "selfattn":
            self.sub_bos = Parameter(_init(rng, d))
            self.sub_blocks = [
                TransformerBlock(rng, d, config.heads, config.dropout)
                for _ in range(config.subdecoder_layers)
            ]
        elif kind in ("crossattn", "nmt"):
            self.sub_bos = Parameter(_init(rng, d))
            self.slot_bias = Parameter(_init(rng, j, d))
            self.sub_blocks = [
                CrossAttentionBlock(rng, d, config.heads, config.dropout,
                                    key_residual=config.key_residual)
                for _ in range(config.subdecoder_layers)
            ]
            if kind == "nmt":
                self.context_bos = Parameter(_init(rng, d))
                self.enricher_blocks = [
                    CrossAttentionBlock(rng, d, config.heads, config.dropout)
                    for _ in range(config.enricher_layers)
                ]

    # -- embedding and main decoder ------------------------------------------

    def subtoken_embeddings(self, tokens: np.ndarray) -> Tensor:
        """Per-slot embeddings, [.., F, D]; ignore slots embed to zero."""
        tokens = np.asarray(tokens)
        parts = []
        for s, emb in enumerate(self.embeddings):
            idx = tokens[..., s]
            keep = (idx != IGNORE_INDEX).astype(ad.default_dtype())[..., None]
            parts.append(emb(idx) * Tensor(keep))
        stacked = ad.concat([p.reshape(p.shape[:-1] + (1, p.shape[-1]))
                             for p in parts], axis=-2)
        return stacked

    def embed_compound(self, tokens: np.ndarray) -> Tensor:
        """Summed sub-token embeddings plus the learned absolute position."""
        tokens = np.asarray(tokens)
        t = tokens.shape[-2]
        if t > self.config.max_sequence_length:
            raise DataError(
                f"sequence length {t} exceeds maximum "
                f"{self.config.max_sequence_length}"
            )
        summed = self.subtoken_embeddings(tokens).sum(axis=-2)
        return summed + self.positions[:t]

    def main_decoder(self, vectors: Tensor, train: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
        """Causal pre-norm transformer stack with a final layer norm."""
        t = vectors.shape[-2]
        mask = np.tril(np.ones((t, t), dtype=bool))
        x = vectors
        for block in self.blocks:
            x = block(x, mask, train, rng)
        return self.final_norm(x)

    def hidden_states(self, tokens: np.ndarray, train: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
        """[B, T+1, D]: position p has seen BOS and tokens < p only."""
        embedded = self.embed_compound(tokens)
        b = embedded.shape[0]
        bos = self.sequence_bos.reshape(1, 1, -1)
        bos = bos + Tensor(np.zeros((b, 1, self.config.model_dim)))
        return self.main_decoder(ad.concat([bos, embedded], axis=1), train, rng)

    # -- sub-decoders, teacher-forced ----------------------------------------

    def subdecoder_logits(self, h: Tensor, sub_embs: Tensor,
                          train: bool = False,
                          rng: np.random.Generator | None = None,
                          hidden_context: tuple[Tensor, np.ndarray] | None = None,
                          ) -> list[Tensor]:
        """Per-slot logits for the compound tokens conditioned on ``h``.

        ``h`` is [..., D] (one hidden per target token), ``sub_embs`` the
        matching [..., F, D] ground-truth sub-token embeddings (teacher
        forcing). ``hidden_context`` (window tensor plus validity mask,
        from ``_enricher_context``) is required for the nmt kind.
        """
        kind = self.config.subdecoder_kind
        j = self.config.width

        if kind == "parallel":
            return [head(h) for head in self.heads_out]

        if kind == "ff":
            logits = [self.heads_out[0](h)]
            state = h
            for s in range(1, j):
                state = self.ff_maps[s - 1](
                    ad.concat([state, sub_embs[..., s - 1, :]], axis=-1)
                )
                logits.append(self.heads_out[s](state))
            return logits

        if kind == "rnn":
            hidden = h
            logits = []
            hidden = self.gru(h, hidden)
            logits.append(self.heads_out[0](hidden))
            for s in range(1, j):
                hidden = self.gru(sub_embs[..., s - 1, :], hidden)
                logits.append(self.heads_out[s](hidden))
            return logits

        bos = self.sub_bos.reshape((1,) * (len(h.shape) - 1) + (1, -1))
        bos = bos + Tensor(np.zeros(h.shape[:-1] + (1, h.shape[-1])))
        kv_embs = sub_embs[..., : j - 1, :] if j > 1 else None

        if kind == "selfattn":
            h_slot = h.reshape(h.shape[:-1] + (1, h.shape[-1]))
            seq = [h_slot, bos]
            if kv_embs is not None:
                seq.append(kv_embs)
            x = ad.concat(seq, axis=-2)                      # [..., J+1, D]
            mask = np.tril(np.ones((j + 1, j + 1), dtype=bool))
            for block in self.sub_blocks:
                x = block(x, mask, train, rng)
            return [self.heads_out[s](x[..., s + 1, :]) for s in range(j)]

        # crossattn / nmt
        if kind == "nmt":
            if hidden_context is None:
                raise ConfigError("nmt sub-decoder needs the hidden context window")
            context, context_mask = hidden_context
            enriched = sub_embs
            for block in self.enricher_blocks:
                enriched = block(enriched, context, context_mask, train, rng)
            kv_embs = enriched[..., : j - 1, :] if j > 1 else None

        queries = h.reshape(h.shape[:-1] + (1, h.shape[-1])) + self.slot_bias
        kv = bos if kv_embs is None else ad.concat([bos, kv_embs], axis=-2)
        mask = np.tril(np.ones((j, j), dtype=bool))          # query s sees keys <= s
        x = queries
        for block in self.sub_blocks:
            x = block(x, kv, mask, train, rng)
        return [self.heads_out[s](x[..., s, :]) for s in range(j)]

    def _enricher_context(self, hidden: Tensor) -> tuple[Tensor, np.ndarray]:
        """Banded window of recent hidden states for every target position.

        hidden is [B, T+1, D]; target t conditions on hidden positions
        max(0, t-w+1)..t plus a learned context BOS. Out-of-range slots
        are gathered from position 0 and masked off. Returns the context
        tensor [B, T, W+1, D] and its validity mask broadcastable over
        heads and query slots.
        """
        w = self.config.enricher_window
        t_total = hidden.shape[1] - 1
        idx = np.arange(t_total)[:, None] - (w - 1) + np.arange(w)[None, :]
        valid = idx >= 0
        gathered = hidden[:, np.maximum(idx, 0)]             # [B, T, W, D]
        b = hidden.shape[0]
        bos = self.context_bos.reshape(1, 1, 1, -1)
        bos = bos + Tensor(np.zeros((b, t_total, 1, hidden.shape[-1])))
        context = ad.concat([bos, gathered], axis=2)         # [B, T, W+1, D]
        mask = np.concatenate(
            [np.ones((t_total, 1), dtype=bool), valid], axis=1
        )  # [T, W+1]
        return context, mask[:, None, None, :]

    def forward_teacher_forced(
        self,
        tokens: np.ndarray,
        loss_mask: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
        want_logprobs: bool = False,
    ) -> TeacherForcedLoss:
        """Mean NLL of a padded batch under teacher forcing.

        ``tokens`` is [B, T, F]; ``loss_mask`` marks the sub-token slots
        that count (pad rows and ignore slots excluded by the caller).
        """
        tokens = np.asarray(tokens)
        loss_mask = np.asarray(loss_mask, dtype=bool)
        if tokens.ndim != 3 or tokens.shape[2] != self.config.width:
            raise DataError(f"expected [B, T, {self.config.width}] tokens, "
                            f"got {tokens.shape}")
        if not loss_mask.any():
            raise DataError("batch with zero scored sub-tokens")

        hidden = self.hidden_states(tokens, train, rng)
        h = hidden[:, :-1, :]                                # predicts token t
        sub_embs = self.subtoken_embeddings(tokens)
        context = (self._enricher_context(hidden)
                   if self.config.subdecoder_kind == "nmt" else None)
        logits = self.subdecoder_logits(h, sub_embs, train, rng, context)

        per_slot_losses = []
        per_feature_nll: dict[str, float] = {}
        per_feature_count: dict[str, int] = {}
        logprobs = (np.zeros(tokens.shape, dtype=np.float64)
                    if want_logprobs else None)
        for s, (name, _) in enumerate(self.config.features):
            targets = np.where(loss_mask[:, :, s], tokens[:, :, s], -1)
            count = int((targets >= 0).sum())
            per_feature_count[name] = per_feature_count.get(name, 0) + count
            if count == 0:
                per_feature_nll.setdefault(name, 0.0)
                continue
            loss_s = ad.softmax_cross_entropy(logits[s], targets, ignore_index=-1)
            per_slot_losses.append((loss_s, count))
            per_feature_nll[name] = (
                per_feature_nll.get(name, 0.0) + float(loss_s.data) * count
            )
            if want_logprobs:
                lp = ad.log_softmax_values(logits[s].data)
                b_idx, t_idx = np.nonzero(targets >= 0)
                logprobs[b_idx, t_idx, s] = lp[
                    b_idx, t_idx, targets[b_idx, t_idx]
                ]

        total_count = sum(c for _, c in per_slot_losses)
        weighted = [ad.scale(loss_s, c / total_count) for loss_s, c in per_slot_losses]
        total = weighted[0]
        for term in weighted[1:]:
            total = total + term
        return TeacherForcedLoss(total, per_feature_nll, per_feature_count, logprobs)

    # -- incremental (sampling-path) decoding --------------------------------

    def next_subtoken_logits(
        self,
        h: Tensor,
        slot: int,
        prev_indices: list[int],
        hidden_window: Tensor | None = None,
    ) -> np.ndarray:
        """Logits for slot ``slot`` of one target token, given the
        already-chosen sub-token indices of that token. ``h`` is [D];
        ``hidden_window`` ([K, D], most recent last) is required for nmt.

        Recomputes from scratch each call: exact, cache-free.
        """
        kind = self.config.subdecoder_kind
        if slot >= self.config.width or len(prev_indices) != slot:
            raise ConfigError(f"slot {slot} needs exactly {slot} previous sub-tokens")

        def emb(s: int, index: int) -> Tensor:
            if index == IGNORE_INDEX:
                return Tensor(np.zeros(self.config.model_dim))
            return self.embeddings[s](np.asarray(index))

        if kind == "parallel":
            return self.heads_out[slot](h).data

        if kind == "ff":
            state = h
            for s in range(1, slot + 1):
                state = self.ff_maps[s - 1](
                    ad.concat([state, emb(s - 1, prev_indices[s - 1])], axis=-1)
                )
            return self.heads_out[slot](state).data

        if kind == "rnn":
            hidden = self.gru(h, h)
            for s in range(1, slot + 1):
                hidden = self.gru(emb(s - 1, prev_indices[s - 1]), hidden)
            return self.heads_out[slot](hidden).data

        embs = [emb(s, prev_indices[s]).reshape(1, -1) for s in range(slot)]

        if kind == "selfattn":
            seq = [h.reshape(1, -1), self.sub_bos.reshape(1, -1)] + embs
            x = ad.concat(seq, axis=0)
            n = x.shape[0]
            mask = np.tril(np.ones((n, n), dtype=bool))
            for block in self.sub_blocks:
                x = block(x, mask)
            return self.heads_out[slot](x[n - 1]).data

        if kind == "nmt":
            if hidden_window is None:
                raise ConfigError("nmt needs the recent hidden window")
            context = ad.concat(
                [self.context_bos.reshape(1, -1), hidden_window], axis=0
            )
            enriched = []
            for e in embs:
                x = e
                for block in self.enricher_blocks:
                    x = block(x, context)
                enriched.append(x)
            embs = enriched

        query = (h + self.slot_bias[slot]).reshape(1, -1)
        kv = ad.concat([self.sub_bos.reshape(1, -1)] + embs, axis=0)
        x = query
        for block in self.sub_blocks:
            x = block(x, kv)
        return self.heads_out[slot](x[0]).data

    # -- persistence ----------------------------------------------------------

    def parameter_breakdown(self) -> dict[str, int]:
        groups: dict[str, int] = {}
        for name, p in self.named_parameters():
            group = name.split(".")[0]
            groups[group] = groups.get(group, 0) + p.size
        groups["total"] = sum(groups.values())
        return groups

    def save(self, path: str | Path, optimizer_state: bool = True,
             extra_meta: dict | None = None) -> None:
        arrays = {}
        for name, p in self.named_parameters():
            arrays[f"param/{name}"] = p.data
            if optimizer_state and p.m is not None:
                arrays[f"adam_m/{name}"] = p.m
                arrays[f"adam_v/{name}"] = p.v
                arrays[f"adam_t/{name}"] = np.asarray(p.step)
        meta = {
            "config": self.config.to_dict(),
            "config_digest": self.config.digest(),
            "format": 1,
        }
        if extra_meta:
            meta.update(extra_meta)
        arrays["meta"] = np.frombuffer(
            json.dumps(meta).encode("utf-8"), dtype=np.uint8
        )
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @staticmethod
    def load(path: str | Path) -> tuple["CompoundModel", dict]:
        """Rebuild a model from a checkpoint; shapes are verified."""
        with np.load(path) as archive:
            meta = json.loads(bytes(archive["meta"]).decode("utf-8"))
            config = ModelConfig.from_dict(meta["config"])
            model = CompoundModel(config)
            params = dict(model.named_parameters())
            for key in archive.files:
                if key == "meta":
                    continue
                section, name = key.split("/", 1)
                if name not in params:
                    raise DataError(f"checkpoint has unknown parameter {name!r}")
                p = params[name]
                value = archive[key]
                if section == "param":
                    if value.shape != p.data.shape:
                        raise DataError(
                            f"checkpoint shape {value.shape} != model shape "
                            f"{p.data.shape} for {name!r}"
                        )
                    p.data = value.astype(ad.default_dtype())
                elif section == "adam_m":
                    p.m = value.astype(ad.default_dtype())
                elif section == "adam_v":
                    p.v = value.astype(ad.default_dtype())
                elif section == "adam_t":
                    p.step = int(value)
        return model, meta
