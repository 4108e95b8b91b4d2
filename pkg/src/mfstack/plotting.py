"""Static figure output (PNG). Uses the non-interactive Agg backend."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import IOFailure  # noqa: E402

_META = {"Software": None}   # keep files byte-identical across matplotlib builds


def _save(fig, filename):
    try:
        fig.savefig(filename, dpi=110, metadata=_META)
    except OSError as e:
        raise IOFailure(f"cannot write {filename}: {e}") from e
    finally:
        plt.close(fig)
    return filename


def line_figure(filename, t, series: dict, title="", ylabel="", bundle=None, bundle_label=None):
    """Named curves, optionally over a faint bundle of many trajectories (rows of ``bundle``)."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    if bundle is not None:
        for row in bundle:
            ax.plot(t, row, lw=0.4, alpha=0.35, color="tab:blue")
        if bundle_label:
            ax.plot([], [], lw=0.8, color="tab:blue", label=bundle_label)
    styles = ["-", "--", "-.", ":"]
    for j, (name, y) in enumerate(series.items()):
        ax.plot(t, y, styles[j % 4], lw=1.6, label=name)
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if series or bundle_label:
        ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, filename)


def sticky_figures(res, out_dir) -> dict:
    """The five sticky-price figures from path 0 of a simulation tracking every follower."""
    t = res.t
    q, p = res.u[0, :, :, 0].T, res.x[0, :, :, 0].T
    out = {}
    specs = [
        ("follower_controls", {}, "Follower outputs q_i", "q_i", q, "q_i"),
        ("follower_prices", {}, "Follower prices p_i", "p_i", p, "p_i"),
        ("price_average", {"p^(N)": res.x_avg[0, :, 0], "E p_i": res.E_xi[:, 0]},
         "Price average and its limit", "price", None, None),
        ("leader_control", {"q0": res.u0[0, :, 0], "E q0": res.Eu0[:, 0]},
         "Leader output", "q0", None, None),
        ("leader_price", {"p0": res.x0[0, :, 0], "E p0": res.E_x0[:, 0]},
         "Leader price", "p0", None, None),
    ]
    for name, series, title, ylabel, bundle, lab in specs:
        out[name + ".png"] = line_figure(os.path.join(out_dir, name + ".png"), t, series, title,
                                         ylabel, bundle, lab)
    return out


def decay_figure(report, filename):
    """Log-log plot of each sweep statistic with its fitted slope."""
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    for s in report.config.statistics:
        N, v, se = report.values(s)
        if len(N) == 0 or np.any(v <= 0):
            continue
        fit = report.slopes[s]
        lab = s if fit.slope is None else f"{s} (slope {fit.slope:.2f})"
        ax.errorbar(N, v, yerr=np.minimum(se, 0.99 * v), marker="o", capsize=3, label=lab)
        if fit.slope is not None:
            ax.plot(N, np.exp(fit.intercept) * N ** fit.slope, "k:", lw=0.8)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("gap")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    return _save(fig, filename)


def margins_figure(report, filename):
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    d = np.arange(len(report.follower_margins))
    ax.errorbar(d - 0.1, report.follower_margins, yerr=report.follower_se, fmt="o", label="follower")
    ax.errorbar(d + 0.1, report.leader_margins, yerr=report.leader_se, fmt="s", label="leader")
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("direction")
    ax.set_ylabel("J(perturbed) - J(equilibrium)")
    ax.set_title(f"Perturbation margins, N={report.N}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, filename)
