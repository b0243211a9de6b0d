"""Report writers: metric CSVs, text tables, tidy sweep/robustness CSVs, charts."""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from evaluation import METRIC_NAMES  # noqa: E402

METRICS_HEADER = ["domain", "metric", "value", "value_x100", "n_users"]
TIDY_HEADER = ["domain", "metric", "value"]


def metric_rows(report):
    """One row per domain x metric, raw and x100."""
    rows = []
    for domain in sorted(report.domains, key=lambda d: d.value):
        for metric in METRIC_NAMES:
            value = report.domains[domain][metric]
            rows.append([domain.value, metric, f"{value:.6f}", f"{100 * value:.2f}",
                         report.n_users[domain]])
    return rows


def write_metrics_csv(path, report):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        writer.writerows(metric_rows(report))
    return path


def format_report(report, title="Results"):
    """Human-readable table, metrics x100."""
    lines = [title, f"{'Domain':<8}" + "".join(f"{m:>8}" for m in METRIC_NAMES) + f"{'Users':>8}"]
    for domain in sorted(report.domains, key=lambda d: d.value):
        values = "".join(f"{100 * report.domains[domain][m]:>8.2f}" for m in METRIC_NAMES)
        lines.append(f"{domain.value:<8}{values}{report.n_users[domain]:>8}")
    return "\n".join(lines)


def write_report_text(path, report, title="Results"):
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_report(report, title) + "\n")
    return path


def tidy_rows(key_name, keyed_reports):
    """Flatten ``[(key, report), ...]`` into (key, domain, metric, value) rows."""
    rows = []
    for key, report in keyed_reports:
        for domain in sorted(report.domains, key=lambda d: d.value):
            for metric in METRIC_NAMES:
                rows.append([key, domain.value, metric, f"{report.domains[domain][metric]:.6f}"])
    return [key_name] + TIDY_HEADER, rows


def write_tidy_csv(path, key_name, keyed_reports, extra=None):
    """Tidy CSV; ``extra`` maps key -> {column: value} for per-key columns
    such as the retained fraction (written as metric rows with domain ALL)."""
    header, rows = tidy_rows(key_name, keyed_reports)
    for key, columns in (extra or {}).items():
        for name, value in columns.items():
            rows.append([key, "ALL", name, f"{value:.6f}"])
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_robustness(out_dir, rows):
    os.makedirs(out_dir, exist_ok=True)
    csv_path = write_tidy_csv(
        os.path.join(out_dir, "robustness.csv"), "rate",
        [(f"{r.rate:.2f}", r.report) for r in rows],
        {f"{r.rate:.2f}": {"retained_fraction": r.retained_fraction, "edit_fraction": r.edit_fraction}
         for r in rows})
    png_path = plot_curve(os.path.join(out_dir, "robustness.png"), [r.rate for r in rows],
                          [r.report for r in rows], "Noise rate", "NDCG@10 under injected noise")
    return csv_path, png_path


def write_sweep(out_dir, rows):
    """Metrics go to sweep.csv; wall-clock seconds go to sweep_seconds.csv
    since they differ between otherwise identical runs."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = write_tidy_csv(os.path.join(out_dir, "sweep.csv"), "n_steps",
                              [(str(r.n_steps), r.report) for r in rows])
    with open(os.path.join(out_dir, "sweep_seconds.csv"), "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["n_steps", "seconds"])
        writer.writerows([r.n_steps, f"{r.seconds:.4f}"] for r in rows)
    png_path = plot_curve(os.path.join(out_dir, "sweep.png"), [r.n_steps for r in rows],
                          [r.report for r in rows], "Inference steps", "NDCG@10 by inference steps")
    return csv_path, png_path


def write_ablation(path, results):
    """``results`` is {variant: [report per seed]}; one row per variant x domain x metric (mean over seeds)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["variant", "domain", "metric", "value", "value_x100", "n_seeds"])
        for variant, reports in results.items():
            domains = sorted(reports[0].domains, key=lambda d: d.value)
            for domain in domains:
                for metric in METRIC_NAMES:
                    mean = sum(r.domains[domain][metric] for r in reports) / len(reports)
                    writer.writerow([variant, domain.value, metric, f"{mean:.6f}", f"{100 * mean:.2f}",
                                     len(reports)])
    return path


def plot_curve(path, xs, reports, xlabel, title):
    """NDCG@10 per domain against ``xs``, saved as PNG."""
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    domains = sorted({d for r in reports for d in r.domains}, key=lambda d: d.value)
    for domain, color in zip(domains, ("#1a6fc4", "#e07b00")):
        ys = [100 * r.domains[domain]["N@10"] if domain in r.domains else float("nan") for r in reports]
        ax.plot(xs, ys, color=color, linewidth=1.5, marker="o", markersize=3, label=f"Domain {domain.value}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("NDCG@10 (x100)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=9, loc="best")
    fig.tight_layout(pad=0.4)
    fig.savefig(path, format="png")
    plt.close(fig)
    return path
