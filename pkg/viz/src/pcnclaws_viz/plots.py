"""Loss-curve and parameter-evolution plots from training/estimation logs.

Training lines:    step=<i> lr=<f> loss=<f> diverged=<i>
Estimation lines:  iter=<i> loss=<f> params=<v1,v2,...>
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class ParseError(Exception):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


@dataclass
class LogData:
    kind: str                     # "train" or "estimate"
    steps: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    params: Optional[np.ndarray] = None   # (n, k) for estimation logs


def parse_log(path) -> LogData:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    steps: List[int] = []
    losses: List[float] = []
    params: List[List[float]] = []
    kind = None
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            fields = dict(kv.split("=", 1) for kv in line.split())
        except ValueError as exc:
            raise ParseError(f"line {lineno}: not key=value pairs", line=lineno) from exc
        if "step" in fields:
            this_kind = "train"
            step_key = "step"
        elif "iter" in fields:
            this_kind = "estimate"
            step_key = "iter"
        else:
            raise ParseError(f"line {lineno}: no step or iter field", line=lineno)
        if kind is None:
            kind = this_kind
        elif kind != this_kind:
            raise ParseError(f"line {lineno}: mixed log kinds", line=lineno)
        try:
            steps.append(int(fields[step_key]))
            losses.append(float(fields["loss"]))
            if kind == "estimate":
                params.append([float(v) for v in fields["params"].split(",")])
        except (KeyError, ValueError) as exc:
            raise ParseError(f"line {lineno}: bad field: {exc}", line=lineno) from exc
    if kind is None:
        raise ParseError("log contains no parsable lines", line=0)
    return LogData(kind=kind, steps=steps, losses=losses,
                   params=np.asarray(params) if params else None)


def plot_logs(log_path, out_path) -> LogData:
    """Loss on a log scale; estimation logs overlay parameter trajectories."""
    data = parse_log(log_path)
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    ax.semilogy(data.steps, np.maximum(data.losses, 1e-300), color="tab:red",
                label="loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    if data.kind == "estimate" and data.params is not None:
        ax2 = ax.twinx()
        arr = data.params
        for j in range(arr.shape[1]):
            scale = max(np.abs(arr[:, j]).max(), 1e-300)
            ax2.plot(data.steps, arr[:, j] / scale, alpha=0.7,
                     label=f"param {j} / {scale:.3g}")
        ax2.set_ylabel("parameters (scaled)")
        ax2.legend(loc="upper right", fontsize=7)
    ax.legend(loc="upper left", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return data
