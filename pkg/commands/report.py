import logging

from commands.simulate import REPORT_FILE
from commands.sweep import SWEEP_COLUMNS, SWEEP_FILE
from commands.train import METRICS_FILE
from trainer.train import MetricsHistory
from utils.errors import ConfigError
from utils.tables import render_table

logger = logging.getLogger('locality.commands')

SUMMARY_COLUMNS = ('prefetch', 'prompts', 'hit_rate', 'plan_hit_rate', 'transfers_per_layer',
                   'estimated_seconds', 'tokens_per_s_est', 'replay_consistent')


def cmd_report(repo):
    """Renders whichever of metrics.csv, report.json and sweep.csv exist in the output directory."""
    sections = []

    if repo.find('metrics') is not None:
        columns = [c for c in MetricsHistory.COLUMNS if c != 'transfers_by_layer']
        sections.append(('Training metrics', render_table(repo.read_csv(METRICS_FILE), columns)))

    if repo.find('report') is not None:
        report = repo.read_json(REPORT_FILE)
        rows = [{'prefetch': mode, **stats} for mode, stats in report['summary'].items()]
        title = f'Decode simulation ({report["policy"]}, C={report["C_effective"]}, {report["max_tokens"]} tokens)'
        sections.append((title, render_table(rows, SUMMARY_COLUMNS)))

    if repo.find('sweep') is not None:
        sections.append(('Sweep', render_table(repo.read_csv(SWEEP_FILE), SWEEP_COLUMNS)))

    if not sections:
        raise ConfigError(f'Nothing to report in {repo.base_path}, run train, simulate or sweep first')

    text = '\n\n'.join(f'{title}\n{table}' for title, table in sections)
    print(text)
    return text
