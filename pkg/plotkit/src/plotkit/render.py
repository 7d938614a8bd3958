"""Overlay figures from a harness run directory.

Consumes only the documented trajectories.csv schema (column ``t`` plus
``<variant>.<state>`` series, with ``der<i>.`` prefixes on multi-DER runs) —
no coupling to the solver package. One figure per requested quantity, all
available variants overlaid; multi-DER quantities get a per-unit subplot grid.
The rendering is read-only over the run directory.
"""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

# variant column prefix -> legend label and line style
VARIANT_STYLE = {
    "full": ("original", dict(color="tab:blue", linestyle="-", linewidth=1.6)),
    "smallsig": ("small-signal", dict(color="tab:green", linestyle="-.", linewidth=1.2)),
    "rom": ("LSOR without y-hat", dict(color="tab:pink", linestyle=":", linewidth=1.4)),
    "rom_blm": ("LSOR with y-hat", dict(color="tab:red", linestyle="--", linewidth=1.2)),
}

AXIS_UNITS = {
    "P": "W", "Q": "var",
    "V_od": "V", "V_oq": "V", "V_odf": "V",
    "I_ld": "A", "I_lq": "A", "I_od": "A", "I_oq": "A",
    "delta": "rad", "Phi_PLL": "V s",
}


class MissingColumnError(KeyError):
    """Requested quantity absent from the CSV header; lists what exists."""

    def __init__(self, quantity, available):
        self.quantity = quantity
        self.available = sorted(available)
        super().__init__(
            f"quantity '{quantity}' not in the run output; available: "
            + ", ".join(self.available)
        )


@dataclass
class PlotSpec:
    run_dir: str
    quantities: list[str]
    out_dir: str | None = None
    fmt: str = "png"  # or "svg"
    styles: dict = field(default_factory=lambda: dict(VARIANT_STYLE))
    dpi: int = 150

    def __post_init__(self):
        if self.fmt not in ("png", "svg"):
            raise ValueError("format must be 'png' or 'svg'")
        if not self.quantities:
            raise ValueError("at least one quantity required")


def load_trajectories(run_dir):
    """Header-indexed columns of trajectories.csv as float arrays."""
    path = os.path.join(run_dir, "trajectories.csv")
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    if data.ndim == 1:
        data = data[None, :]
    return header, {name: data[:, j] for j, name in enumerate(header)}


def _quantity_index(header):
    """Map quantity -> {variant -> {unit_key -> column}}.

    unit_key is '' for single-DER runs and the 'der<i>' prefix otherwise.
    """
    index = {}
    pattern = re.compile(r"^(?P<variant>[a-z_]+)\.(?:(?P<unit>der\d+)\.)?(?P<state>.+)$")
    for col in header:
        if col == "t":
            continue
        m = pattern.match(col)
        if not m:
            continue
        state = m.group("state")
        index.setdefault(state, {}).setdefault(
            m.group("variant"), {})[m.group("unit") or ""] = col
    return index


def render(spec: PlotSpec):
    """Write one overlay figure per quantity; returns render records.

    Each record is (path, quantity, series_count). Raises MissingColumnError
    with the available quantity names when a request cannot be served.
    """
    header, columns = load_trajectories(spec.run_dir)
    index = _quantity_index(header)
    out_dir = spec.out_dir or spec.run_dir
    os.makedirs(out_dir, exist_ok=True)
    t = columns["t"]
    records = []

    for quantity in spec.quantities:
        if quantity not in index:
            raise MissingColumnError(quantity, index.keys())
        variants = index[quantity]
        units = sorted({u for cols in variants.values() for u in cols},
                       key=lambda s: (len(s), s))
        n_units = max(len(units), 1)
        ncols = min(n_units, 4)
        nrows = int(np.ceil(n_units / ncols))
        fig, axes = plt.subplots(nrows, ncols, squeeze=False,
                                 figsize=(4.2 * ncols, 3.0 * nrows), sharex=True)
        series_count = 0
        for ax_idx, unit in enumerate(units):
            ax = axes[ax_idx // ncols][ax_idx % ncols]
            for variant in ("full", "smallsig", "rom", "rom_blm"):
                col = variants.get(variant, {}).get(unit)
                if col is None:
                    continue
                label, style = spec.styles.get(variant, (variant, {}))
                ax.plot(t, columns[col], label=label, **style)
                series_count += 1
            unit_name = unit if unit else quantity
            ax.set_title(unit_name if unit else "")
            ax.grid(True, alpha=0.3)
            unit_str = AXIS_UNITS.get(quantity)
            ax.set_ylabel(f"{quantity} [{unit_str}]" if unit_str else quantity)
        for ax in axes[-1]:
            ax.set_xlabel("t [s]")
        axes[0][0].legend(loc="best", fontsize=8)
        for k in range(len(units), nrows * ncols):
            axes[k // ncols][k % ncols].axis("off")
        fig.suptitle(quantity)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{quantity}.{spec.fmt}")
        fig.savefig(path, dpi=spec.dpi)
        plt.close(fig)
        records.append((path, quantity, series_count))
    return records
