"""Experiment driver: drift/accumulation metrics against the reference
model, reasoning-length budget control, and sweep execution with CSV/JSON
report emission.

Config files are UTF-8 JSON with a ``schema_version`` field; plans use the
W-A-KV bit notation (e.g. "4-16-16"). Worker parallelism for sweeps is
capped by the QUANTLAB_THREADS environment variable.
"""

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .quantrun import QuantPlan, forward_quantized, prepare_runtime
from .rng import make_rng
from .toymodel import (
    THINK_END_ID,
    WAIT_ID,
    Session,
    ToyModel,
    forward_reference,
    sample_token,
)

SCHEMA_VERSION = 1
CODE_VERSION = "quantlab-0.1.0"

LC_OFF = "off"
LC_SUPPRESS = "suppress"
LC_PROMOTE = "promote"


@dataclass
class LengthControl:
    mode: str = LC_OFF
    budget: int = 32
    max_waits: int = 8
    answer_budget: int = 32

    def __post_init__(self):
        if self.mode not in (LC_OFF, LC_SUPPRESS, LC_PROMOTE):
            raise ValueError(f"bad length-control mode {self.mode!r}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.mode == LC_PROMOTE and self.max_waits < 1:
            raise ValueError("max_waits must be >= 1 when promoting")


@dataclass
class ExperimentConfig:
    plan: QuantPlan = field(default_factory=QuantPlan)
    probe_tokens: Optional[list] = None
    prompts: list = field(default_factory=lambda: [[0]])
    calib_sequences: Optional[list] = None
    max_new: int = 64
    temperature: float = 0.6
    top_p: float = 0.95
    length_control: LengthControl = field(default_factory=LengthControl)
    seed: int = 0
    n_runs: int = 1

    def to_row_fields(self) -> dict:
        return {
            "plan": self.plan.bits_string(),
            "w_method": self.plan.w_method,
            "wa_method": self.plan.wa_method,
            "kv_method": self.plan.kv_method,
            "seed": self.seed,
            "code_version": CODE_VERSION,
        }


@dataclass
class DriftReport:
    positions: np.ndarray
    max_abs_err: np.ndarray
    mse: np.ndarray
    top1_agree: np.ndarray  # 1.0 where argmax matches, per position
    cumulative_disagreement: np.ndarray
    first_divergence: int  # -1 when the paths never diverge
    meta: dict = field(default_factory=dict)

    @property
    def final_disagreement(self) -> int:
        return int(self.cumulative_disagreement[-1])


@dataclass
class LengthReport:
    thinking_tokens: list
    total_tokens: list
    meta: dict = field(default_factory=dict)

    @property
    def mean_thinking(self) -> float:
        return float(np.mean(self.thinking_tokens))

    @property
    def median_thinking(self) -> float:
        return float(np.median(self.thinking_tokens))


def run_drift(model: ToyModel, cfg: ExperimentConfig) -> DriftReport:
    """Teacher-forced probe through reference and quantized models;
    per-position logit error and top-1 agreement."""
    probe = cfg.probe_tokens
    if probe is None:
        raise ValueError("drift runs need probe_tokens")
    ref = forward_reference(model, probe)
    q = forward_quantized(model, probe, cfg.plan,
                          calib_sequences=cfg.calib_sequences)
    diff = q - ref
    max_abs = np.max(np.abs(diff), axis=1)
    mse = np.mean(diff * diff, axis=1)
    agree = (np.argmax(ref, axis=1) == np.argmax(q, axis=1)).astype(float)
    cum_dis = np.cumsum(1.0 - agree).astype(int)
    div = np.nonzero(agree == 0)[0]
    return DriftReport(
        positions=np.arange(len(probe)),
        max_abs_err=max_abs,
        mse=mse,
        top1_agree=agree,
        cumulative_disagreement=cum_dis,
        first_divergence=int(div[0]) if div.size else -1,
        meta=cfg.to_row_fields(),
    )


def generate_with_length_control(model: ToyModel, prompt, plan: QuantPlan,
                                 lc: LengthControl, rng,
                                 temperature: float = 0.6, top_p: float = 0.95,
                                 calib_sequences=None, runtime=None):
    """One controlled generation. Thinking tokens are the tokens emitted
    before THINK_END. Suppression force-inserts THINK_END at the budget;
    promotion replaces an early THINK_END with WAIT while the wait budget
    lasts. After THINK_END the answer phase runs for a fixed budget.

    Returns (sequence, thinking_count, total_generated).
    """
    if runtime is None and not plan.passthrough:
        runtime = prepare_runtime(model, plan, calib_sequences)
    sess = Session(model, runtime=None if plan.passthrough else runtime)
    logits = None
    for t in prompt:
        logits = sess.step(t)
    seq = list(prompt)
    max_len = model.config.max_seq_len

    thinking = 0
    waits_used = 0
    think_done = False

    def emit(tok):
        nonlocal logits
        seq.append(tok)
        if len(seq) < max_len:
            logits = sess.step(tok)
            return True
        return False

    while not think_done and len(seq) < max_len:
        if lc.mode == LC_SUPPRESS and thinking >= lc.budget:
            emit(THINK_END_ID)  # forced early termination
            think_done = True
            break
        nxt = sample_token(logits, temperature, top_p, rng)
        if nxt == THINK_END_ID:
            if (lc.mode == LC_PROMOTE and thinking < lc.budget
                    and waits_used < lc.max_waits):
                waits_used += 1
                if not emit(WAIT_ID):
                    break
                thinking += 1
                continue
            emit(THINK_END_ID)
            think_done = True
            break
        if not emit(nxt):
            break
        thinking += 1

    answered = 0
    while think_done and answered < lc.answer_budget and len(seq) < max_len:
        nxt = sample_token(logits, temperature, top_p, rng)
        if not emit(nxt):
            break
        answered += 1

    return seq, thinking, len(seq) - len(prompt)


def run_length_control(model: ToyModel, cfg: ExperimentConfig) -> LengthReport:
    lc = cfg.length_control
    runtime = None
    if not cfg.plan.passthrough:
        runtime = prepare_runtime(model, cfg.plan, cfg.calib_sequences)
    thinking = []
    totals = []
    for r in range(cfg.n_runs):
        rng = make_rng(cfg.seed + r)
        prompt = cfg.prompts[r % len(cfg.prompts)]
        _, think, total = generate_with_length_control(
            model, prompt, cfg.plan, lc, rng,
            temperature=cfg.temperature, top_p=cfg.top_p, runtime=runtime)
        thinking.append(think)
        totals.append(total)
    meta = cfg.to_row_fields()
    meta.update({"lc_mode": lc.mode, "budget": lc.budget,
                 "max_waits": lc.max_waits})
    return LengthReport(thinking_tokens=thinking, total_tokens=totals, meta=meta)


def _sweep_one(model, cfg: ExperimentConfig) -> dict:
    row = cfg.to_row_fields()
    try:
        if cfg.probe_tokens is not None:
            rep = run_drift(model, cfg)
            row.update({
                "status": "ok",
                "final_disagreement": rep.final_disagreement,
                "final_max_abs_err": float(rep.max_abs_err[-1]),
                "mean_mse": float(np.mean(rep.mse)),
                "first_divergence": rep.first_divergence,
            })
        else:
            rep = run_length_control(model, cfg)
            row.update({
                "status": "ok",
                "mean_thinking": rep.mean_thinking,
                "median_thinking": rep.median_thinking,
            })
    except Exception as e:  # noqa: BLE001 - sweep isolation is the contract
        row.update({"status": "error", "error": f"{type(e).__name__}: {e}"})
    return row


def run_sweep(model: ToyModel, cfgs: list, workers: Optional[int] = None) -> list:
    """Execute independent configs; failures are recorded per row and never
    affect other rows."""
    if workers is None:
        workers = int(os.environ.get("QUANTLAB_THREADS", "1"))
    if workers <= 1 or len(cfgs) <= 1:
        return [_sweep_one(model, c) for c in cfgs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: _sweep_one(model, c), cfgs))


_SWEEP_COLUMNS = [
    "plan", "w_method", "wa_method", "kv_method", "seed", "code_version",
    "status", "final_disagreement", "final_max_abs_err", "mean_mse",
    "first_divergence", "mean_thinking", "median_thinking", "error",
]


def write_sweep_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=_SWEEP_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def write_sweep_json(rows: list, path) -> None:
    with open(path, "w") as f:
        json.dump({"schema_version": SCHEMA_VERSION, "rows": rows}, f,
                  indent=2, sort_keys=True)


def drift_rows(rep: DriftReport) -> list:
    rows = []
    for i in range(len(rep.positions)):
        row = dict(rep.meta)
        row.update({
            "position": int(rep.positions[i]),
            "max_abs_err": float(rep.max_abs_err[i]),
            "mse": float(rep.mse[i]),
            "top1_agree": float(rep.top1_agree[i]),
            "cumulative_disagreement": int(rep.cumulative_disagreement[i]),
        })
        rows.append(row)
    return rows


def write_drift_csv(rep: DriftReport, path) -> None:
    rows = drift_rows(rep)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for row in rows:
            w.writerow(row)
