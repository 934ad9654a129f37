"""PNG renderings of the CSV series written by the command-line tool."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_cdf(x, empirical, fitted, path, title: str = "", xlabel: str = "x") -> None:
    """Empirical vs fitted CDF, with a log-scale survival panel for the tail."""
    x = np.asarray(x, dtype=float)
    emp = np.asarray(empirical, dtype=float)
    fit = np.asarray(fitted, dtype=float)
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.6))
    a.step(x, emp, where="post", label="empirical", lw=1.2)
    a.plot(x, fit, "--", label="fitted", lw=1.2)
    a.set_xlabel(xlabel)
    a.set_ylabel("CDF")
    a.legend(loc="lower right")
    keep = (1 - emp) > 0
    b.semilogy(x[keep], 1 - emp[keep], drawstyle="steps-post", label="empirical", lw=1.2)
    b.semilogy(x[keep], np.clip(1 - fit[keep], 1e-300, None), "--", label="fitted", lw=1.2)
    b.set_xlabel(xlabel)
    b.set_ylabel("1 - CDF")
    if title:
        fig.suptitle(title)
    _save(fig, path)


def plot_convergence(traces: dict, path, beta: float | None = None, reference: float | None = None) -> None:
    """Running estimate with CI band and relative half-width, one line per method.

    ``traces`` maps a label to rows (n, estimate, ci_lo, ci_hi, rel_half_width).
    """
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 3.8))
    for label, rows in traces.items():
        t = np.asarray(rows, dtype=float)
        if t.size == 0:
            continue
        line = a.plot(t[:, 0], t[:, 1], label=label, lw=1.2)[0]
        a.fill_between(t[:, 0], t[:, 2], t[:, 3], color=line.get_color(), alpha=0.2, lw=0)
        a.plot(t[-1, 0], t[-1, 1], "o", color=line.get_color())
        b.plot(t[:, 0], t[:, 4], label=label, lw=1.2, color=line.get_color())
    if reference is not None:
        a.axhline(reference, color="k", ls=":", lw=1, label="reference")
    if beta is not None:
        b.axhline(beta, color="k", ls=":", lw=1)
    a.set_xlabel("samples")
    a.set_ylabel("estimate")
    a.legend()
    b.set_xlabel("samples")
    b.set_ylabel("relative half-width")
    b.set_ylim(0, 1.5)
    _save(fig, path)


def plot_ce_levels(levels: dict, path) -> None:
    """CE relaxed-event level per iteration, one line per label."""
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for label, lv in levels.items():
        ax.plot(np.arange(1, len(lv) + 1), lv, "o-", label=label, ms=3, lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("level")
    ax.legend()
    _save(fig, path)
