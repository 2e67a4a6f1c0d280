"""Report figures.  Everything renders off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "svg.hashsalt": "etaxi",
}
BLUE, RED, GREEN, GRAY = "#1f5aa6", "#c0392b", "#3a9d5d", "#9a9a9a"


def new(ncols: int = 1, width: float = 4.5, height: float = 3.0):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(1, ncols, figsize=(width * ncols, height))
    return fig, ax


def save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(RC):
        fig.tight_layout()
        # no Software/date chunks, so reruns are byte-identical
        fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def net_revenue_hist(simulated, recorded=None, dp_value=None, path="net_revenue.png"):
    fig, ax = new()
    with plt.rc_context(RC):
        data = [np.asarray(simulated, float)]
        if recorded is not None and len(recorded):
            data.append(np.asarray(recorded, float))
        lo = min(d.min() for d in data)
        hi = max(d.max() for d in data)
        bins = np.linspace(lo, hi if hi > lo else lo + 1.0, 31)
        if len(data) > 1:
            ax.hist(data[1], bins=bins, color=GRAY, alpha=0.7, label="recorded drivers", density=True)
        ax.hist(data[0], bins=bins, color=BLUE, alpha=0.7, label="policy rollouts", density=True)
        if dp_value is not None and np.isfinite(dp_value):
            ax.axvline(dp_value, color=RED, lw=1.2, label="expected (DP)")
        ax.set_xlabel("net revenue per shift (USD)")
        ax.set_ylabel("density")
        ax.legend(frameon=False)
    return save(fig, path)


def energy_split(labels, from_initial, from_charging, path="energy_split.png"):
    fig, ax = new()
    with plt.rc_context(RC):
        x = np.arange(len(labels))
        ax.bar(x, from_initial, color=GRAY, label="initial battery")
        ax.bar(x, from_charging, bottom=from_initial, color=GREEN, label="charging stations")
        ax.set_xticks(x, labels)
        ax.set_ylabel("energy per shift (kWh)")
        ax.legend(frameon=False)
    return save(fig, path)


def hourly(series: dict, ylabel: str, path):
    """One line per named 24-value series."""
    fig, ax = new()
    with plt.rc_context(RC):
        for (name, vals), color in zip(series.items(), [BLUE, RED, GREEN, GRAY]):
            ax.plot(range(24), vals, marker="o", ms=3, color=color, label=name)
        ax.set_xticks(range(0, 24, 3))
        ax.set_xlabel("hour of day")
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend(frameon=False)
    return save(fig, path)


def value_heatmap(values_t0: np.ndarray, junctions, bin_kwh: float, low_kwh: float, path="values.png"):
    """Expected shift revenue at t=0 by start junction and battery level."""
    fig, ax = new(width=5.0, height=3.4)
    with plt.rc_context(RC):
        v = np.where(np.isfinite(values_t0), values_t0, np.nan)
        im = ax.imshow(v.T, origin="lower", aspect="auto", cmap="viridis",
                       extent=(-0.5, len(junctions) - 0.5, low_kwh, low_kwh + bin_kwh * v.shape[1]))
        ax.set_xlabel("start junction (index)")
        ax.set_ylabel("battery (kWh)")
        fig.colorbar(im, ax=ax, label="expected net revenue (USD)")
    return save(fig, path)


def price_sweep(rows, path="gas_price.png"):
    fig, ax = new()
    with plt.rc_context(RC):
        x = [r["gas_usd_per_gallon"] for r in rows]
        y = [r["mean_net_revenue"] for r in rows]
        e = [r["se_net_revenue"] for r in rows]
        ax.errorbar(x, y, yerr=e, color=BLUE, marker="s", capsize=3)
        ax.set_xlabel("gasoline price (USD/gallon)")
        ax.set_ylabel("mean net revenue (USD)")
    return save(fig, path)
