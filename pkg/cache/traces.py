import json
import logging

from moe.trace import RoutingTrace

logger = logging.getLogger('locality.cache')


def write_traces(path, traces):
    """One JSON record per sequence: L, T, E, probs and per-(layer, token) request index lists."""
    with open(path, 'w', encoding='utf-8') as f:
        for trace in traces:
            f.write(json.dumps(trace.to_record()))
            f.write('\n')

    logger.info(f'Saved {len(traces)} traces to {path}')


def read_traces(path):
    with open(path, 'r', encoding='utf-8') as f:
        traces = [RoutingTrace.from_record(json.loads(line)) for line in f if line.strip()]

    for trace in traces:
        trace.validate()

    return traces
