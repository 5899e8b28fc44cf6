"""
Report rendering for aggregated benchmark results (markdown, csv, json)

Works on any object with `cells` (CellSummary-like records) and `ci_method`,
so it has no dependency on the orchestration module.
"""
import csv
import io
import json
import logging
import os

from app.services.artifacts import ensure_dir

logger = logging.getLogger(__name__)

REPORT_FORMATS = ('markdown', 'csv', 'json')

METRIC_COLUMNS = (
    ('m1', 'M1 ↓', min),
    ('m2', 'M2 ↓', min),
    ('m3', 'M3 ↓', min),
    ('m4', 'M4 ↑', max),
)

UNPARSABLE_TEXT = '_Model output equations not parsable by the program._'

CSV_FIELDS = (
    'backend', 'dag', 'condition', 'status', 'repetitions', 'run_count', 'failed_run_count',
    'm1_mean', 'm1_ci_half_width', 'm2_mean', 'm2_ci_half_width',
    'm3_mean', 'm3_ci_half_width', 'm4_mean', 'm4_ci_half_width',
    'note', 'provenance',
)


class ReportError(Exception):
    pass


def format_value(metric):
    """'mean ± half-width' at three decimals; 'n/a' for a single-run half-width"""
    half_width = metric.get('ci_half_width')
    hw_text = 'n/a' if half_width is None else f"{half_width:.3f}"
    return f"{metric['mean']:.3f} ± {hw_text}"


def _ordered_cells(cells):
    """Group rows by DAG then condition (first-appearance order), keeping backend order within a group"""
    dag_order, condition_order = {}, {}
    for cell in cells:
        dag_order.setdefault(cell.dag, len(dag_order))
        condition_order.setdefault(cell.condition, len(condition_order))
    return sorted(
        enumerate(cells),
        key=lambda item: (dag_order[item[1].dag], condition_order[item[1].condition], item[0]),
    )


def _best_means(cells):
    """(dag, condition, metric) -> best mean, only where the group has two or more scored rows"""
    groups = {}
    for cell in cells:
        if cell.metrics:
            groups.setdefault((cell.dag, cell.condition), []).append(cell)
    best = {}
    for (dag, condition), members in groups.items():
        if len(members) < 2:
            continue
        for name, _, pick in METRIC_COLUMNS:
            means = [round(m.metrics[name]['mean'], 3) for m in members if name in m.metrics]
            if means:
                best[(dag, condition, name)] = pick(means)
    return best


def _status_text(cell):
    if cell.status == 'unparsable':
        return UNPARSABLE_TEXT
    if cell.status == 'no-ground-truth':
        return '_No ground truth: runs not scored._'
    return f"_No successful runs ({cell.failed_run_count} failed)._"


def render_markdown(report):
    headers = ['Model', 'DAG', 'Condition'] + [title for _, title, _ in METRIC_COLUMNS]
    lines = [
        '| ' + ' | '.join(headers) + ' |',
        '| ' + ' | '.join(['---'] * len(headers)) + ' |',
    ]
    best = _best_means(report.cells)

    for _, cell in _ordered_cells(report.cells):
        row = [cell.backend, cell.dag, cell.condition]
        if not cell.metrics:
            row += [_status_text(cell)] + [''] * (len(METRIC_COLUMNS) - 1)
        else:
            for name, _, _ in METRIC_COLUMNS:
                text = format_value(cell.metrics[name])
                if best.get((cell.dag, cell.condition, name)) == round(cell.metrics[name]['mean'], 3):
                    text = f"**{text}**"
                row.append(text)
        lines.append('| ' + ' | '.join(row) + ' |')

    lines.append('')
    lines.append(f"Values are mean ± 95% CI half-width ({report.ci_method}); n/a: single run. "
                 'Bold: best mean per column within a DAG/condition group.')
    failing = [c for c in report.cells if c.failed_run_count]
    if failing:
        lines.append('')
        lines.append('Failed runs:')
        for cell in failing:
            lines.append(
                f"- {cell.backend} / {cell.dag} / {cell.condition}: "
                f"{cell.failed_run_count} of {cell.repetitions} run(s) failed"
            )
    return '\n'.join(lines) + '\n'


def render_csv(report):
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CSV_FIELDS, lineterminator='\n')
    writer.writeheader()
    for cell in report.cells:
        row = {
            'backend': cell.backend,
            'dag': cell.dag,
            'condition': cell.condition,
            'status': cell.status,
            'repetitions': cell.repetitions,
            'run_count': cell.run_count,
            'failed_run_count': cell.failed_run_count,
            'note': cell.note or '',
            'provenance': ';'.join(cell.provenance or []),
        }
        for name, _, _ in METRIC_COLUMNS:
            metric = cell.metrics.get(name) if cell.metrics else None
            row[f"{name}_mean"] = repr(metric['mean']) if metric else ''
            hw = metric.get('ci_half_width') if metric else None
            row[f"{name}_ci_half_width"] = repr(hw) if hw is not None else ''
        writer.writerow(row)
    return buffer.getvalue()


def render_json(report):
    return json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + '\n'


_RENDERERS = {
    'markdown': render_markdown,
    'csv': render_csv,
    'json': render_json,
}


def render_report(report, format='markdown', path=None):
    """
    Render an aggregate report

    Args:
        report: AggregateReport
        format: One of markdown, csv, json
        path: Optional file to write

    Returns:
        Rendered text
    """
    if format not in _RENDERERS:
        raise ReportError(f"Unknown report format {format!r} (expected one of {REPORT_FORMATS})")
    if not report.cells:
        raise ReportError('Cannot render an empty report')

    text = _RENDERERS[format](report)
    if path:
        ensure_dir(os.path.dirname(os.path.abspath(path)))
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
        logger.info(f"📝 Wrote {format} report to {path}")
    return text
