"""Plot benchmark timings against sequence length."""

import os

import matplotlib.colors as colors
import matplotlib.pyplot as plt
import numpy as np

from . import settings
from . import utils


def get_colors(n, cmap="viridis", start=0.0, stop=1.0, alpha=1.0, return_hex=False):
    """
    Sample n evenly spaced line colors from a colormap.

    Parameters
    ----------
    n : int
        how many colors
    cmap : string
        matplotlib colormap name
    start : float
        first position in the colormap, in [0, 1]
    stop : float
        last position in the colormap, in [0, 1]
    alpha : float
        opacity applied to every color
    return_hex : bool
        if True, return "#rrggbb" strings and drop alpha

    Returns
    -------
    list
    """
    sampled = plt.get_cmap(cmap)(np.linspace(start, stop, n))
    if return_hex:
        return [colors.to_hex(c) for c in sampled]
    return [(r, g, b, alpha) for r, g, b, _ in sampled]


def plot_scaling(
    df,
    ax=None,
    figsize=(7, 5),
    cmap="viridis",
    show=True,
    close=False,
    save=False,
    filepath=None,
    dpi=300,
):
    """
    Plot median wall time against sequence length on log-log axes.

    One line is drawn per (mechanism, mode) pair. Failure rows are skipped.
    Dotted O(n) and O(n^2) reference lines start from the fastest time at
    the smallest length.

    Parameters
    ----------
    df : pandas.DataFrame
        benchmark results, as returned by bench.records_to_frame or
        bench.read_csv
    ax : matplotlib axis
        if not None, plot on this preexisting axis
    figsize : tuple
        if ax is None, create new figure with size (width, height)
    cmap : string
        name of a matplotlib colormap for the lines
    show : bool
        if True, call pyplot.show() to show the figure
    close : bool
        if True, call pyplot.close() to close the figure
    save : bool
        if True, save the figure to disk at filepath
    filepath : string
        if save is True, the path to the file. file format determined from
        extension. if None, use settings.imgs_folder/scaling.png
    dpi : int
        if save is True, the resolution of saved file

    Returns
    -------
    fig, ax : tuple
        matplotlib figure, axis
    """
    df = df[df["ok"]]

    if ax is None:
        fig, ax = plt.subplots(figsize=figsize)
    else:
        fig = ax.figure

    groups = list(df.groupby(["mechanism", "mode"], sort=True))
    line_colors = get_colors(max(len(groups), 1), cmap=cmap, stop=0.9)
    for ((mechanism, mode), group), color in zip(groups, line_colors):
        group = group.sort_values("n")
        ax.plot(
            group["n"],
            group["wall_ns"] / 1e9,
            marker="o",
            color=color,
            label=f"{mechanism} ({mode})",
        )

    if len(df) > 0:
        n_ref = np.array(sorted(df["n"].unique()), dtype=float)
        t0 = df[df["n"] == n_ref[0]]["wall_ns"].min() / 1e9
        for power in (1, 2):
            ax.plot(
                n_ref,
                t0 * (n_ref / n_ref[0]) ** power,
                ls=":",
                c="#999999",
                lw=1,
                label=f"O(n^{power})",
            )

    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("sequence length n")
    ax.set_ylabel("median wall time (s)")
    ax.legend(loc="upper left", fontsize="small")

    fig, ax = _save_and_show(fig, ax, save, show, close, filepath, dpi)
    return fig, ax


def _save_and_show(fig, ax, save=False, show=True, close=True, filepath=None, dpi=300):
    """
    Draw the figure, then optionally save, show and close it.

    Parameters
    ----------
    fig : matplotlib.figure.Figure
    ax : matplotlib.axes.Axes
    save : bool
        if True, write the figure to filepath
    show : bool
        if True, call pyplot.show()
    close : bool
        if True, call pyplot.close()
    filepath : string
        output path, format taken from the extension. if None, use
        settings.imgs_folder/scaling.png
    dpi : int
        resolution of the saved file

    Returns
    -------
    fig, ax : tuple
    """
    fig.canvas.draw()
    fig.canvas.flush_events()

    if save:
        if filepath is None:
            filepath = os.path.join(settings.imgs_folder, "scaling.png")
        utils.make_folder(filepath)
        ext = os.path.splitext(filepath)[1].lstrip(".") or "png"
        fig.tight_layout()
        fig.savefig(filepath, dpi=dpi, format=ext)
        utils.log(f"Saved figure to disk at {filepath}")

    if show:
        plt.show()
    if close:
        plt.close(fig)

    return fig, ax
