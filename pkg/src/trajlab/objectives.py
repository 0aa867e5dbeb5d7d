"""The four pre-training objectives as mask-pattern generators + loss assembly.

Each generator turns a batch of token windows into a MaskedBatch: corrupted
inputs, original targets, a boolean loss mask, and the attention mode the
trunk should run in. The env token at position 0 is never masked and never
a loss target; loss targets are always value tokens.

* random-mask reconstruction (bidirectional, BERT-style 0.15/0.8/0.1 rates)
* next-token prediction (causal, deterministic shift)
* mixed random+suffix masking with an autoregressive-token guarantee
* three-part forward/inverse/hindsight-control masking with a curriculum
  schedule over block counts
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .model import BIDIRECTIONAL, CAUSAL, ModelConfig, masked_logits
from .numcore import Tensor
from .tokenizer import KIND_ACT, KIND_OBS, TokenSequence, Vocabulary

OBJECTIVES = ("cbert", "cgpt", "cmtm", "csmart")
SMART_SUBS = ("forward_dynamics", "inverse_dynamics", "hindsight_control")


@dataclass
class MaskedBatch:
    inputs: np.ndarray  # (B, T) int32, corrupted view
    targets: np.ndarray  # (B, T) int32, original tokens
    loss_mask: np.ndarray  # (B, T) bool
    mode: str
    objective: str
    sub_objectives: list | None = None  # per-sample tag for the three-part objective
    info: dict | None = None  # generator extras (e.g. drawn masking ratios)


def validate_batch(batch: MaskedBatch, vocab: Vocabulary) -> None:
    """Loss positions must target value tokens only (never MASK/PAD/env)."""
    targets = batch.targets[batch.loss_mask]
    if not vocab.is_value(targets).all():
        raise ValueError("loss positions with non-value targets")
    if batch.mode == BIDIRECTIONAL and batch.loss_mask[:, 0].any():
        raise ValueError("position 0 (env token) must never be a loss target")


@dataclass
class SmartSchedule:
    """Block counts for hindsight control; both ramp up during training."""

    k_start: int = 1
    kp_start: int = 1
    increment_fraction: float = 0.2  # +1 every this fraction of total steps
    cap: int = 4

    def values(self, step: int, total_steps: int) -> tuple[int, int]:
        if total_steps <= 0:
            return self.k_start, self.kp_start
        inc = int(step / (self.increment_fraction * total_steps))
        k = min(self.k_start + inc, self.cap)
        kp = min(self.kp_start + inc, self.cap)
        return k, kp

    def to_dict(self):
        return {
            "k_start": self.k_start,
            "kp_start": self.kp_start,
            "increment_fraction": self.increment_fraction,
            "cap": self.cap,
        }


def _stack(windows: list[TokenSequence]):
    tokens = np.stack([w.tokens for w in windows]).astype(np.int32)
    kinds = np.stack([w.kinds for w in windows])
    steps = np.stack([w.timesteps for w in windows])
    return tokens, kinds, steps


def _maskable(kinds: np.ndarray) -> np.ndarray:
    return (kinds == KIND_OBS) | (kinds == KIND_ACT)


def mask_cbert(
    windows: list[TokenSequence],
    vocab: Vocabulary,
    rng: np.random.Generator,
    noising_ratio: float = 0.15,
    mask_prob: float = 0.8,
    random_prob: float = 0.1,
) -> MaskedBatch:
    """Independent position selection at ``noising_ratio``; selected positions
    are MASKed / replaced by a random value token / left unchanged at
    ``mask_prob`` / ``random_prob`` / remainder. Loss on selected positions."""
    if noising_ratio <= 0.0:
        raise ValueError("noising ratio must be positive")
    tokens, kinds, _ = _stack(windows)
    maskable = _maskable(kinds)
    sel = (rng.random(tokens.shape) < noising_ratio) & maskable
    for b in range(tokens.shape[0]):
        if not sel[b].any():
            sel[b] = (rng.random(tokens.shape[1]) < noising_ratio) & maskable[b]
            if not sel[b].any():
                raise RuntimeError("degenerate masking draw twice in a row")
    inputs = tokens.copy()
    u = rng.random(tokens.shape)
    to_mask = sel & (u < mask_prob)
    to_random = sel & (u >= mask_prob) & (u < mask_prob + random_prob)
    inputs[to_mask] = vocab.mask_id
    inputs[to_random] = rng.integers(0, vocab.value_count, size=int(to_random.sum()))
    return MaskedBatch(inputs, tokens, sel, BIDIRECTIONAL, "cbert")


def mask_cgpt(windows: list[TokenSequence], vocab: Vocabulary) -> MaskedBatch:
    """Next-token view: input tokens[:-1], target tokens[1:], loss everywhere
    except PAD targets. Deterministic; causal attention."""
    tokens, kinds, _ = _stack(windows)
    inputs = tokens[:, :-1]
    targets = tokens[:, 1:]
    loss = targets != vocab.pad_id
    return MaskedBatch(inputs, targets, loss, CAUSAL, "cgpt")


def _suffix_autoregressive_ok(mask_row: np.ndarray) -> bool:
    """Some masked position has every later position masked too."""
    masked_idx = np.nonzero(mask_row)[0]
    if masked_idx.size == 0:
        return False
    # the last masked position has no unmasked successors iff it is the final
    # token; in general check the tail beyond each masked run
    last = mask_row.shape[0] - 1
    return bool(mask_row[last])


def mask_cmtm(
    windows: list[TokenSequence],
    vocab: Vocabulary,
    rng: np.random.Generator,
    max_ratio: float = 0.6,
) -> MaskedBatch:
    """Random masking at a per-sample rate drawn from U[0, max_ratio], plus a
    contiguous masked suffix of up to one timestep block; guarantees at least
    one autoregressive token (all of its future masked)."""
    tokens, kinds, _ = _stack(windows)
    maskable = _maskable(kinds)
    B, T = tokens.shape
    sel = np.zeros_like(maskable)
    ratios = rng.uniform(0.0, max_ratio, size=B)
    for b, win in enumerate(windows):
        sel[b] = (rng.random(T) < ratios[b]) & maskable[b]
        span = win.k_tok + win.l_tok
        suffix = int(rng.integers(1, span + 1))
        sel[b, T - suffix :] = True
        if not _suffix_autoregressive_ok(sel[b]):
            # constructive fallback: mask everything after the last unmasked token
            unmasked = np.nonzero(~sel[b] & maskable[b])[0]
            if unmasked.size:
                sel[b, unmasked[-1] + 1 :] = maskable[b, unmasked[-1] + 1 :]
    sel &= maskable
    inputs = tokens.copy()
    inputs[sel] = vocab.mask_id
    return MaskedBatch(inputs, tokens, sel, BIDIRECTIONAL, "cmtm", info={"ratios": ratios})


def _complete_blocks(win: TokenSequence, kind: int, count: int) -> np.ndarray:
    """Timesteps whose ``kind`` block is fully inside the window."""
    sel = win.kinds == kind
    steps = win.timesteps[sel]
    if steps.size == 0:
        return np.empty(0, dtype=np.int64)
    uniq, counts = np.unique(steps, return_counts=True)
    return uniq[counts == count]


def mask_csmart(
    windows: list[TokenSequence],
    vocab: Vocabulary,
    rng: np.random.Generator,
    schedule: SmartSchedule,
    step: int = 0,
    total_steps: int = 1,
    sub: str | None = None,
) -> MaskedBatch:
    """One of three sub-patterns per sample (uniform unless ``sub`` pins it):

    forward dynamics: mask part of the final observation block, predict it;
    inverse dynamics: mask part of one intermediate action block;
    hindsight control: mask parts of k action and k' observation blocks,
    predict only the masked action tokens.
    """
    k, kp = schedule.values(step, total_steps)
    tokens, kinds, steps = _stack(windows)
    B, T = tokens.shape
    sel_input = np.zeros((B, T), dtype=bool)  # positions hidden from the model
    sel_loss = np.zeros((B, T), dtype=bool)  # positions contributing to loss
    subs = []
    for b, win in enumerate(windows):
        choice = sub if sub is not None else SMART_SUBS[int(rng.integers(0, 3))]
        subs.append(choice)
        K, L = win.k_tok, win.l_tok
        if choice == "forward_dynamics":
            n = int(rng.integers(1, K + 1))
            pos = T - K + rng.permutation(K)[:n]
            sel_input[b, pos] = True
            sel_loss[b, pos] = True
        elif choice == "inverse_dynamics":
            act_steps = _complete_blocks(win, KIND_ACT, L)
            if act_steps.size == 0:
                raise ValueError("window too short to contain an intermediate action block")
            t_choice = int(act_steps[rng.integers(0, act_steps.size)])
            block = np.nonzero((win.timesteps == t_choice) & (win.kinds == KIND_ACT))[0]
            n = int(rng.integers(1, L + 1))
            pos = rng.permutation(block)[:n]
            sel_input[b, pos] = True
            sel_loss[b, pos] = True
        else:  # hindsight control
            act_steps = _complete_blocks(win, KIND_ACT, L)
            obs_steps = _complete_blocks(win, KIND_OBS, K)
            if act_steps.size == 0:
                raise ValueError("window too short to contain an intermediate action block")
            chosen_a = rng.permutation(act_steps)[: min(k, act_steps.size)]
            chosen_o = rng.permutation(obs_steps)[: min(kp, obs_steps.size)]
            for t_a in chosen_a:
                block = np.nonzero((win.timesteps == t_a) & (win.kinds == KIND_ACT))[0]
                n = int(rng.integers(1, L + 1))
                pos = rng.permutation(block)[:n]
                sel_input[b, pos] = True
                sel_loss[b, pos] = True  # loss only on action tokens
            for t_o in chosen_o:
                block = np.nonzero((win.timesteps == t_o) & (win.kinds == KIND_OBS))[0]
                n = int(rng.integers(1, K + 1))
                pos = rng.permutation(block)[:n]
                sel_input[b, pos] = True
    inputs = tokens.copy()
    inputs[sel_input] = vocab.mask_id
    return MaskedBatch(inputs, tokens, sel_loss, BIDIRECTIONAL, "csmart", subs)


def make_batch(
    objective: str,
    windows: list[TokenSequence],
    vocab: Vocabulary,
    rng: np.random.Generator,
    schedule: SmartSchedule | None = None,
    step: int = 0,
    total_steps: int = 1,
) -> list[MaskedBatch]:
    """Masked views for one optimizer step: a single view for most
    objectives, three (one per sub-pattern, losses to be summed) for the
    three-part objective."""
    if objective == "cbert":
        return [mask_cbert(windows, vocab, rng)]
    if objective == "cgpt":
        return [mask_cgpt(windows, vocab)]
    if objective == "cmtm":
        return [mask_cmtm(windows, vocab, rng)]
    if objective == "csmart":
        schedule = schedule or SmartSchedule()
        return [
            mask_csmart(windows, vocab, rng, schedule, step, total_steps, sub=s)
            for s in SMART_SUBS
        ]
    raise ValueError(f"unknown objective '{objective}'")


def loss(weights: dict[str, Tensor], config: ModelConfig, batch: MaskedBatch) -> Tensor:
    """Mean cross-entropy over the batch's loss positions in its attention mode."""
    logits_sel, rows = masked_logits(weights, config, batch.inputs, batch.loss_mask, batch.mode)
    targets_sel = batch.targets.reshape(-1)[rows]
    return nc.cross_entropy(logits_sel, targets_sel, np.ones(rows.size, dtype=bool))
