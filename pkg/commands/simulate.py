import logging

import numpy as np
from tqdm import tqdm

from cache.policies import PolicySpec, run_eviction_policy
from cache.traces import write_traces
from commands.pipeline import CHECKPOINT, PREDICTOR_CHECKPOINT, load_dataset, load_model
from offload.latency import LatencyModel
from offload.simulator import effective_capacity, simulate_batch_decode, simulate_decode
from predictor.embedding import embed_prompt
from predictor.mlp import predict_prefetch, train_predictor
from predictor.plan import prefetch_hit_rate, random_prefetch
from predictor.targets import build_targets
from utils.seeds import rng_for

logger = logging.getLogger('locality.commands')

PREFETCH_MODES = ('predictor', 'random', 'none')
DECODE_FILE = 'decode.csv'
REPORT_FILE = 'report.json'
TRACES_FILE = 'traces.jsonl'
DECODE_COLUMNS = ('prompt', 'topic', 'prefetch', 'policy', 'C', 'max_tokens', 'tokens', 'n_miss',
                  'transfers_per_layer', 'prefill_misses', 'evictions', 'hit_rate', 'plan_hit_rate',
                  'estimated_seconds', 'tokens_per_s_est', 'replay_consistent')


def fit_prefetch_predictor(cfg, model, train_set):
    prompts = [s.prompt(cfg.simulate.prompt_len) for s in train_set]
    dataset = build_targets(
        model=model,
        prompts=prompts,
        gen_len=cfg.simulate.target_gen_len,
        d_emb=cfg.predictor.d_emb,
        damping=cfg.predictor.damping
    )
    mlp = train_predictor(dataset, cfg.predictor, L=model.config.L, E=model.config.E)
    return mlp, dataset


def _plan_for(mode, mlp, prompt, index, model, C, pcfg, seed):
    if mode == 'predictor':
        return predict_prefetch(mlp, embed_prompt(prompt, d_emb=pcfg.d_emb, damping=pcfg.damping), C)
    elif mode == 'random':
        return random_prefetch(model.config.L, model.config.E, C, rng_for(seed, 'prefetch', index))

    return None


def evaluate_prompts(model, mlp, sequences, policy, C, max_tokens, lat, pcfg, prompt_len, seed,
                     capacity_multiplier=1.0, modes=PREFETCH_MODES):
    """Decodes every evaluation prompt once per prefetch mode and replays each
    emitted trace through the cache simulator to cross-check the miss counts."""
    spec = PolicySpec.parse(policy)
    C_eff = effective_capacity(C, model.config.E, capacity_multiplier)
    rows, reports = [], []

    for index, seq in enumerate(tqdm(sequences, desc='decode', disable=len(sequences) < 10)):
        prompt = seq.prompt(prompt_len)

        for mode in modes:
            plan = _plan_for(mode, mlp, prompt, index, model, C_eff, pcfg, seed)
            report = simulate_decode(
                model=model,
                prompt=prompt,
                policy=spec,
                C=C,
                prefetch=plan,
                lat=lat,
                max_tokens=max_tokens,
                capacity_multiplier=capacity_multiplier
            )
            replay = run_eviction_policy(report.trace, spec, report.C, init=report.plan)
            consistent = bool(np.array_equal(replay.misses, report.misses))

            if not consistent:
                logger.warning(f'Trace replay disagrees with the simulator on prompt {index} ({mode})')

            generated = report.trace.slice_tokens(report.prompt_len)
            rows.append({
                'prompt': index,
                'topic': seq.topic,
                'prefetch': mode,
                'policy': spec.label,
                'C': report.C,
                'max_tokens': max_tokens,
                'tokens': report.tokens,
                'n_miss': report.n_miss,
                'transfers_per_layer': report.transfers_per_layer,
                'prefill_misses': int(report.prefill_misses.sum()),
                'evictions': int(report.evictions.sum()),
                'hit_rate': report.hit_rate,
                'plan_hit_rate': prefetch_hit_rate(report.plan, generated) if report.plan is not None else '',
                'estimated_seconds': report.estimated_seconds,
                'tokens_per_s_est': report.throughput,
                'replay_consistent': consistent,
            })
            reports.append(report)

    return rows, reports


def evaluate_batches(model, mlp, sequences, policy, C, max_tokens, lat, pcfg, prompt_len, seed, batch_size,
                     capacity_multiplier=1.0, modes=PREFETCH_MODES):
    C_eff = effective_capacity(C, model.config.E, capacity_multiplier)
    summary = {}

    for mode in modes:
        reports = []

        for start in range(0, len(sequences), batch_size):
            prompts = [seq.prompt(prompt_len) for seq in sequences[start:start + batch_size]]
            plans = [_plan_for(mode, mlp, p, start + i, model, C_eff, pcfg, seed) for i, p in enumerate(prompts)]
            reports.append(simulate_batch_decode(
                model=model,
                prompts=prompts,
                policy=policy,
                C=C,
                plans=None if mode == 'none' else plans,
                lat=lat,
                max_tokens=max_tokens,
                capacity_multiplier=capacity_multiplier
            ))

        seconds = sum(r.estimated_seconds for r in reports)
        summary[mode] = {
            'batches': len(reports),
            'hit_rate': float(np.mean([r.hit_rate for r in reports])),
            'transfers_per_layer': float(np.mean([r.transfers_per_layer for r in reports])),
            'estimated_seconds': float(np.mean([r.estimated_seconds for r in reports])),
            'tokens_per_s_est': sum(r.tokens for r in reports) / seconds if seconds > 0 else 0.0,
        }

    return summary


def summarize(rows):
    summary = {}

    for mode in dict.fromkeys(r['prefetch'] for r in rows):
        group = [r for r in rows if r['prefetch'] == mode]
        seconds = sum(r['estimated_seconds'] for r in group)
        plan_hits = [r['plan_hit_rate'] for r in group if r['plan_hit_rate'] != '']

        summary[mode] = {
            'prompts': len(group),
            'hit_rate': float(np.mean([r['hit_rate'] for r in group])),
            'transfers_per_layer': float(np.mean([r['transfers_per_layer'] for r in group])),
            'estimated_seconds': float(np.mean([r['estimated_seconds'] for r in group])),
            'tokens_per_s_est': sum(r['tokens'] for r in group) / seconds if seconds > 0 else 0.0,
            'plan_hit_rate': float(np.mean(plan_hits)) if plan_hits else None,
            'replay_consistent': all(r['replay_consistent'] for r in group),
        }

    return summary


def latency_for(cfg, model):
    lat = cfg.simulate.latency
    if not cfg.simulate.calibrate_compute:
        return lat

    calibrated = LatencyModel.calibrated(
        model,
        t_transfer_per_expert=lat.t_transfer_per_expert,
        t_prefetch=lat.t_prefetch
    )
    logger.info(f'Calibrated compute time {calibrated.t_compute_per_token * 1e3:.3f} ms/token')
    return calibrated


def cmd_simulate(cfg, repo):
    """Fits the prefetch predictor on the fine-tuned checkpoint and decodes the
    evaluation split with predictor, random and no prefetch."""
    model, _ = load_model(repo, CHECKPOINT)
    train_set, val_set = load_dataset(cfg, repo)
    sim = cfg.simulate

    mlp, dataset = fit_prefetch_predictor(cfg, model, train_set)
    repo.save_checkpoint(
        filename=PREDICTOR_CHECKPOINT,
        kind='predictor',
        config={**cfg.predictor.to_dict(), 'L': model.config.L, 'E': model.config.E},
        module=mlp,
        extra={'loss_history': mlp.loss_history, 'skipped': dataset.skipped}
    )

    lat = latency_for(cfg, model)
    rows, reports = evaluate_prompts(
        model=model,
        mlp=mlp,
        sequences=val_set[:sim.n_eval_prompts],
        policy=sim.policy,
        C=sim.C,
        max_tokens=sim.max_tokens,
        lat=lat,
        pcfg=cfg.predictor,
        prompt_len=sim.prompt_len,
        seed=cfg.seed,
        capacity_multiplier=sim.capacity_multiplier
    )
    repo.write_csv(DECODE_FILE, rows, DECODE_COLUMNS)
    write_traces(
        repo.add_file(TRACES_FILE).path,
        [rep.trace for rep, row in zip(reports, rows) if row['prefetch'] == 'predictor']
    )

    summary = summarize(rows)
    report = {
        'policy': PolicySpec.parse(sim.policy).label,
        'C': sim.C,
        'C_effective': effective_capacity(sim.C, model.config.E, sim.capacity_multiplier),
        'max_tokens': sim.max_tokens,
        'prompts': len(rows) // len(PREFETCH_MODES),
        'latency': lat.to_dict(),
        'predictor': {
            'final_kl': mlp.loss_history[-1] if mlp.loss_history else None,
            'examples': len(dataset),
            'skipped': dataset.skipped,
        },
        'summary': summary,
        'replay_consistent': all(r['replay_consistent'] for r in rows),
    }

    if sim.batch_size > 1:
        report['batch'] = {
            'batch_size': sim.batch_size,
            'summary': evaluate_batches(
                model=model,
                mlp=mlp,
                sequences=val_set[:sim.n_eval_prompts],
                policy=sim.policy,
                C=sim.C,
                max_tokens=sim.max_tokens,
                lat=lat,
                pcfg=cfg.predictor,
                prompt_len=sim.prompt_len,
                seed=cfg.seed,
                batch_size=sim.batch_size,
                capacity_multiplier=sim.capacity_multiplier
            ),
        }

    repo.write_json(REPORT_FILE, report)

    for mode, stats in summary.items():
        print(f'{mode:>9}: hit_rate={stats["hit_rate"]:.3f} transfers/layer={stats["transfers_per_layer"]:.2f} '
              f'tokens/s(est)={stats["tokens_per_s_est"]:.1f}')

    return report
