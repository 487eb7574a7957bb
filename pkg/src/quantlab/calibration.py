"""Calibration sets and channel-magnitude statistics.

Calibration file format: newline-delimited decimal token ids, one sequence
per line. ChannelStats export as CSV with columns
site, channel, mean_abs, max_abs, tokens, pos_bucket.
"""

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContextOverflow, FileTooSmall, ParseError, UnknownSite
from .toymodel import Session, ToyModel, generate


@dataclass
class CalibrationSet:
    sequences: list
    domain_tag: str = "pretrain"
    seq_len: int = 0
    count: int = 0

    def __post_init__(self):
        if not self.count:
            self.count = len(self.sequences)
        if not self.seq_len and self.sequences:
            self.seq_len = max(len(s) for s in self.sequences)


def parse_sequences(path) -> list:
    seqs = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                seqs.append([int(t) for t in line.split()])
            except ValueError as e:
                raise ParseError(f"line {ln}: {e}")
    return seqs


def write_sequences(seqs, path) -> None:
    with open(path, "w") as f:
        for s in seqs:
            f.write(" ".join(str(t) for t in s) + "\n")


def load_calibration(path, seq_len: int, count: int, rng) -> CalibrationSet:
    """Randomly crop `count` windows of `seq_len` tokens from the file's
    sequences; deterministic under the rng seed."""
    seqs = parse_sequences(path)
    eligible = [s for s in seqs if len(s) >= seq_len]
    total = sum(len(s) for s in seqs)
    if not eligible or total < count * seq_len:
        raise FileTooSmall(
            f"need {count} windows of {seq_len} tokens, file has {total}")
    if total == count * seq_len:
        # exact fit: partition the concatenation, no randomness needed
        flat = [t for s in seqs for t in s]
        out = [flat[i * seq_len : (i + 1) * seq_len] for i in range(count)]
        return CalibrationSet(out, domain_tag="pretrain", seq_len=seq_len,
                              count=count)
    out = []
    for _ in range(count):
        s = eligible[int(rng.integers(0, len(eligible)))]
        start = int(rng.integers(0, len(s) - seq_len + 1))
        out.append(s[start : start + seq_len])
    return CalibrationSet(out, domain_tag="pretrain", seq_len=seq_len, count=count)


def self_generate(m: ToyModel, prompts, seq_len: int, count: int, rng,
                  temperature: float = 0.6, top_p: float = 0.95) -> CalibrationSet:
    """Generate calibration continuations with the unquantized model at the
    default sampling settings; tagged "self_generated"."""
    if not prompts:
        raise ValueError("prompts must be nonempty")
    out = []
    for i in range(count):
        prompt = list(prompts[i % len(prompts)])
        if seq_len > m.config.max_seq_len:
            raise ContextOverflow(f"seq_len {seq_len} > context {m.config.max_seq_len}")
        max_new = seq_len - len(prompt)
        seq = generate(m, prompt, max_new=max_new, temperature=temperature,
                       top_p=top_p, rng=rng)
        out.append(seq[:seq_len])
    return CalibrationSet(out, domain_tag="self_generated", seq_len=seq_len,
                          count=count)


@dataclass
class ChannelStats:
    site: str
    mean_abs: np.ndarray
    max_abs: np.ndarray
    tokens: int
    pos_bucket: str = "all"

    @staticmethod
    def merge(a: "ChannelStats", b: "ChannelStats") -> "ChannelStats":
        """Token-count-weighted mean, elementwise max."""
        total = a.tokens + b.tokens
        mean = (a.mean_abs * a.tokens + b.mean_abs * b.tokens) / total
        return ChannelStats(a.site, mean, np.maximum(a.max_abs, b.max_abs),
                            total, a.pos_bucket)


class _SiteAccumulator:
    def __init__(self, n_channels):
        self.sum_abs = np.zeros(n_channels)
        self.max_abs = np.zeros(n_channels)
        self.tokens = 0

    def add(self, row):
        a = np.abs(row)
        self.sum_abs += a
        self.max_abs = np.maximum(self.max_abs, a)
        self.tokens += 1


def known_sites(m: ToyModel) -> list:
    sites = ["lm_head_in"]
    for i in range(m.config.n_layers):
        sites += [f"layer{i}.{s}" for s in
                  ("attn_in", "attn_out_in", "mlp_in", "mlp_down_in",
                   "k_pre_bias", "k_post_bias", "k_post_rope")]
    return sites


class _StatsRecorder:
    """Streaming per-channel |.| accumulators, optionally bucketed by
    position range."""

    def __init__(self, sites, buckets: Optional[list] = None):
        self.sites = set(sites)
        self.buckets = buckets  # list of (lo, hi) half-open ranges, or None
        self.acc = {}

    def _bucket_of(self, pos):
        if self.buckets is None:
            return "all"
        for lo, hi in self.buckets:
            if lo <= pos < hi:
                return f"[{lo},{hi})"
        return None

    def record(self, site, row, pos):
        if site not in self.sites:
            return
        bucket = self._bucket_of(pos)
        if bucket is None:
            return
        key = (site, bucket)
        if key not in self.acc:
            self.acc[key] = _SiteAccumulator(len(row))
        self.acc[key].add(row)


def capture_channel_stats(m: ToyModel, calib: CalibrationSet, sites,
                          pos_buckets: Optional[list] = None) -> list:
    """Per-channel mean-|.| and max-|.| at the named capture sites over all
    calibration sequences."""
    valid = set(known_sites(m))
    for s in sites:
        if s not in valid:
            raise UnknownSite(f"unknown capture site {s!r}")
    rec = _StatsRecorder(sites, pos_buckets)
    for seq in calib.sequences:
        sess = Session(m, recorder=rec)
        for t in seq:
            sess.step(t)
    out = []
    for (site, bucket), acc in sorted(rec.acc.items()):
        out.append(ChannelStats(site=site, mean_abs=acc.sum_abs / acc.tokens,
                                max_abs=acc.max_abs, tokens=acc.tokens,
                                pos_bucket=bucket))
    return out


def stats_to_csv(stats, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["site", "channel", "mean_abs", "max_abs", "tokens", "pos_bucket"])
        for st in stats:
            for ch in range(len(st.mean_abs)):
                w.writerow([st.site, ch, repr(float(st.mean_abs[ch])),
                            repr(float(st.max_abs[ch])), st.tokens, st.pos_bucket])
