"""Synthetic multi-key associative recall and a plain gradient-descent trainer.

Each sequence opens with ``pairs`` key/value bigrams (keys drawn without
replacement from the lower half of the vocabulary, values from the upper
half). The rest of the sequence repeats query/answer bigrams: a random bound
key followed by its value. Only query positions are scored, and the target
at each is the value bound to that key. Echoing the answer keeps the input
stream in the same bigram format as the context, which is what lets the
model find the binding within a few thousand plain gradient steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chunkwise import DecayUnderflowError
from .core import ContractError, DimensionError, make_rng
from .layer import LayerConfig, backward_layer, check_params, decode_step, forward_layer, init_decode_state, init_params


@dataclass
class RecallTask:
    vocab: int = 16
    pairs: int = 8
    length: int = 64

    def __post_init__(self):
        if self.vocab % 2 or self.pairs > self.vocab // 2:
            raise ValueError("need an even vocab with at least `pairs` keys in its lower half")
        if self.length <= 2 * self.pairs:
            raise ValueError("sequence too short for the pairs plus one query")

    def sample(self, rng: np.random.Generator, batch: int):
        """Return ``(tokens, targets, mask)``; mask marks query positions."""
        half = self.vocab // 2
        P, L = self.pairs, self.length
        keys = np.argsort(rng.random((batch, half)), axis=1)[:, :P]
        values = rng.integers(half, self.vocab, size=(batch, P))
        tokens = np.empty((batch, L), dtype=np.int64)
        tokens[:, 0:2 * P:2] = keys
        tokens[:, 1:2 * P:2] = values
        qpos = np.arange(2 * P, L, 2)
        which = rng.integers(0, P, size=(batch, len(qpos)))
        rows = np.arange(batch)[:, None]
        tokens[:, qpos] = keys[rows, which]
        apos = qpos[qpos + 1 < L] + 1
        tokens[:, apos] = values[rows, which[:, :len(apos)]]
        targets = np.zeros((batch, L), dtype=np.int64)
        targets[:, qpos] = values[rows, which]
        mask = np.zeros((batch, L), dtype=bool)
        mask[:, qpos] = True
        return tokens, targets, mask


@dataclass
class RecallModel:
    """Embedding -> residual mixer layer -> linear readout."""

    cfg: LayerConfig
    params: dict
    embed: np.ndarray
    readout: np.ndarray

    @classmethod
    def init(cls, cfg: LayerConfig, vocab: int, rng: np.random.Generator) -> "RecallModel":
        params = init_params(cfg, rng)
        embed = rng.normal(size=(vocab, cfg.d_model)).astype(cfg.dtype)
        # Zero readout: the initial prediction is uniform, loss = ln(vocab).
        readout = np.zeros((cfg.d_model, vocab), dtype=cfg.dtype)
        return cls(cfg, params, embed, readout)

    @classmethod
    def from_tensors(cls, cfg: LayerConfig, tensors: dict) -> "RecallModel":
        for name in ("embed", "readout"):
            if name not in tensors:
                raise ContractError(f"missing tensor {name!r}")
        params = {k: v for k, v in tensors.items() if k not in ("embed", "readout")}
        check_params(params, cfg)
        embed, readout = tensors["embed"], tensors["readout"]
        if embed.ndim != 2 or embed.shape[1] != cfg.d_model:
            raise DimensionError(f"embed: expected (vocab, {cfg.d_model}), got {embed.shape}")
        if readout.shape != (cfg.d_model, embed.shape[0]):
            raise DimensionError(f"readout: expected {(cfg.d_model, embed.shape[0])}, got {readout.shape}")
        return cls(cfg, params, embed, readout)

    @property
    def vocab(self) -> int:
        return self.embed.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.params, "embed": self.embed, "readout": self.readout}

    def logits(self, tokens: np.ndarray, return_cache: bool = False):
        x = self.embed[tokens]
        y, state, cache = forward_layer(self.params, self.cfg, x, return_cache=True)
        h = x + y
        logits = h @ self.readout
        if return_cache:
            return logits, (x, h, cache)
        return logits

    def greedy_decode(self, prompt: np.ndarray, steps: int):
        """Feed ``prompt`` token by token, then emit ``steps`` argmax tokens.

        Every generated token is fed back, so the returned state has consumed
        the prompt followed by all of ``generated``.
        """
        state = init_decode_state(self.cfg)
        out: list[int] = []
        logits = None
        for tok in prompt:
            logits, state = self._step(int(tok), state)
        for _ in range(steps):
            nxt = int(np.argmax(logits))
            out.append(nxt)
            logits, state = self._step(nxt, state)
        return out, state

    def _step(self, tok: int, state):
        x = self.embed[tok]
        y, state = decode_step(self.params, self.cfg, state, x)
        return (x + y) @ self.readout, state

    def loss_and_grads(self, tokens, targets, mask):
        logits, (x, h, cache) = self.logits(tokens, return_cache=True)
        loss, dlogits, acc = cross_entropy(logits, targets, mask)
        d_readout = h.reshape(-1, h.shape[-1]).T @ dlogits.reshape(-1, dlogits.shape[-1])
        dh = dlogits @ self.readout.T
        grads, dx = backward_layer(self.params, self.cfg, cache, dh)
        dx = dx + dh
        d_embed = np.zeros_like(self.embed)
        np.add.at(d_embed, tokens.reshape(-1), dx.reshape(-1, dx.shape[-1]))
        grads = {**grads, "embed": d_embed, "readout": d_readout}
        return loss, grads, acc

    def apply(self, grads: dict, lr: float) -> None:
        for name, g in grads.items():
            if name == "embed":
                self.embed -= lr * g
            elif name == "readout":
                self.readout -= lr * g
            else:
                self.params[name] -= lr * g


def cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Mean masked cross-entropy, its gradient wrt logits, and accuracy."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = mask.sum()
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(picked * mask) / n)
    d = np.exp(logp)
    d[..., :] -= np.eye(logits.shape[-1], dtype=d.dtype)[targets]
    d *= (mask / n)[..., None]
    acc = float(np.sum((logp.argmax(axis=-1) == targets) & mask) / n)
    return loss, d, acc


def descent_step(task: RecallTask, cfg: LayerConfig, lr: float, batch: int, seed: int) -> tuple[float, float]:
    """Loss on one batch before and after a single gradient step on that batch."""
    model = RecallModel.init(cfg, task.vocab, make_rng(seed))
    tokens, targets, mask = task.sample(make_rng(seed + 1), batch)
    before, grads, _ = model.loss_and_grads(tokens, targets, mask)
    model.apply(grads, lr)
    after, _, _ = cross_entropy(model.logits(tokens), targets, mask)
    return before, after


@dataclass
class TrainResult:
    rule: str
    lr: float
    initial_loss: float
    final_loss: float
    best_loss: float
    final_accuracy: float
    steps: int
    diverged: bool
    history: list[float] = field(default_factory=list)
    model: RecallModel | None = None

    @property
    def reduction(self) -> float:
        return 1.0 - self.best_loss / self.initial_loss


def train(task: RecallTask, cfg: LayerConfig, lr: float, steps: int, batch: int, seed: int,
          eval_batch: int = 256, target_reduction: float | None = None, eval_every: int = 50,
          return_model: bool = False) -> TrainResult:
    """Plain gradient descent on freshly sampled batches.

    Loss is measured on a fixed held-out batch every ``eval_every`` steps.
    With ``target_reduction`` set, training stops as soon as the held-out loss
    falls by that fraction.
    """
    rng = make_rng(seed)
    model = RecallModel.init(cfg, task.vocab, rng)
    data_rng = make_rng(seed + 1)
    held = task.sample(make_rng(seed + 2), eval_batch)

    def evaluate():
        logits = model.logits(held[0])
        loss, _, acc = cross_entropy(logits, held[1], held[2])
        return loss, acc

    initial, acc = evaluate()
    best, last = initial, initial
    history = [initial]
    diverged = False
    step = 0
    # a runaway step shows up as a non-finite loss or as decay leaving the engine's range
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, steps + 1):
            tokens, targets, mask = task.sample(data_rng, batch)
            try:
                loss, grads, _ = model.loss_and_grads(tokens, targets, mask)
            except DecayUnderflowError:
                diverged = True
                break
            if not math.isfinite(loss):
                diverged = True
                break
            model.apply(grads, lr)
            if step % eval_every == 0 or step == steps:
                try:
                    last, acc = evaluate()
                except DecayUnderflowError:
                    diverged = True
                    break
                if not math.isfinite(last):
                    diverged = True
                    break
                history.append(last)
                best = min(best, last)
                if target_reduction is not None and 1.0 - best / initial >= target_reduction:
                    break
    return TrainResult(cfg.rule, lr, initial, last, best, acc, step, diverged, history,
                       model if return_model else None)
