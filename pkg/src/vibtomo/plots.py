"""Slice heatmaps of voxel fields (PNG)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fem import VoxelGrid  # noqa: E402

# one fixed colormap for every field; estimate and truth share a normalization
COLORMAP = "inferno"


def _normalized(values):
    lo, hi = float(np.min(values)), float(np.max(values))
    return (np.asarray(values) - lo) / (hi - lo) if hi > lo else np.zeros_like(values, dtype=float)


def slice_heatmaps(fields: dict, grid: VoxelGrid, path, title: str = "", shared: bool = False) -> None:
    """One row per named field, one column per z slice (bottom to top).

    Each field is min-max normalized to [0, 1] before plotting; with
    ``shared`` all rows use the joint min/max instead, so an estimate and
    its truth are directly comparable.
    """
    names = list(fields)
    if shared:
        joint = _normalized(np.concatenate([np.ravel(fields[n]) for n in names]))
        sizes = np.cumsum([0] + [np.size(fields[n]) for n in names])
        normed = {n: joint[sizes[i]:sizes[i + 1]] for i, n in enumerate(names)}
    else:
        normed = {n: _normalized(np.ravel(fields[n])) for n in names}
    nz = grid.dims[2]
    fig, axes = plt.subplots(len(names), nz, figsize=(1.6 * nz + 1, 1.7 * len(names) + 0.4), squeeze=False)
    im = None
    for r, name in enumerate(names):
        vol = grid.reshape(normed[name])
        for z in range(nz):
            ax = axes[r, z]
            # x to the right, y upward
            im = ax.imshow(vol[:, :, z].T, origin="lower", cmap=COLORMAP, vmin=0.0, vmax=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(f"z={z}", fontsize=8)
        axes[r, 0].set_ylabel(name, fontsize=9)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.8, label="normalized")
    fig.savefig(path, dpi=100)
    plt.close(fig)
