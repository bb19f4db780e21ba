import asyncio
import logging
from concurrent.futures import ProcessPoolExecutor
from itertools import product

from tqdm.asyncio import tqdm_asyncio

from cache.policies import PolicySpec
from commands.pipeline import base_model, fine_tune_trainer, load_dataset
from commands.simulate import evaluate_prompts, fit_prefetch_predictor, summarize
from moe.model import MoEModel
from trainer.train import validation_metrics
from utils.errors import TrainingDiverged

logger = logging.getLogger('locality.commands')

SWEEP_FILE = 'sweep.csv'
SWEEP_COLUMNS = ('lambda_cs', 'lambda_rm', 'train_gamma', 'c_sim', 'status', 'val_nll', 'l_cs',
                 'train_transfers_per_layer', 'kendall_tau', 'policy', 'gamma', 'C', 'max_tokens', 'prefetch',
                 'transfers_per_layer', 'hit_rate', 'estimated_seconds', 'tokens_per_s_est')


def train_points(sweep):
    """Cross-product of the training grids plus a lambda=0 control for every (gamma, C_sim)."""
    points = list(product(sweep.lambda_cs, sweep.lambda_rm, sweep.train_gamma, sweep.c_sim))
    points += [(0.0, 0.0, gamma, c_sim) for gamma, c_sim in product(sweep.train_gamma, sweep.c_sim)]

    seen = {}
    for lcs, lrm, gamma, c_sim in points:
        key = (float(lcs), float(lrm), float(gamma), int(c_sim))
        seen.setdefault(key, None)

    return list(seen)


def eval_points(sweep):
    return list(product(sweep.policy, sweep.C, sweep.max_tokens, sweep.prefetch))


def run_sweep_point(cfg, base_state, point, train_set, val_set):
    """Fine-tunes one copy of the base model and evaluates it at every evaluation grid point."""
    lambda_cs, lambda_rm, gamma, c_sim = point
    base = MoEModel(cfg.model)
    base.load_state_dict(base_state)
    base.eval()

    train_cfg = cfg.with_train(weights={'lambda_cs': lambda_cs, 'lambda_rm': lambda_rm, 'gamma': gamma, 'C_sim': c_sim})
    model, trainer = fine_tune_trainer(base, train_cfg)
    status = 'ok'

    try:
        trainer.fit(train_set, val_set)
    except TrainingDiverged as e:
        logger.warning(f'Sweep point {point} diverged in epoch {e.epoch}, evaluating the last good weights')
        model.load_state_dict(e.last_good_state)
        status = 'diverged'

    model.eval()
    if trainer.history:
        last = trainer.history[-1]
        val_nll, l_cs, transfers, tau = last.val_nll, last.l_cs, last.transfers_per_layer, last.kendall_tau
    else:
        val_nll, by_layer, tau = validation_metrics(model, val_set[:train_cfg.val_sequences], train_cfg.weights, base)
        l_cs, transfers = '', float(by_layer.mean())

    sweep, sim = cfg.sweep, cfg.simulate
    mlp = fit_prefetch_predictor(cfg, model, train_set)[0] if any(sweep.prefetch) else None
    rows = []

    for policy, C, max_tokens, prefetch in eval_points(sweep):
        mode = 'predictor' if prefetch else 'none'
        decode_rows, _ = evaluate_prompts(
            model=model,
            mlp=mlp,
            sequences=val_set[:sim.n_eval_prompts],
            policy=policy,
            C=C,
            max_tokens=max_tokens,
            lat=sim.latency,
            pcfg=cfg.predictor,
            prompt_len=sim.prompt_len,
            seed=cfg.seed,
            capacity_multiplier=sim.capacity_multiplier,
            modes=(mode,)
        )
        stats = summarize(decode_rows)[mode]
        spec = PolicySpec.parse(policy)

        rows.append({
            'lambda_cs': lambda_cs,
            'lambda_rm': lambda_rm,
            'train_gamma': gamma,
            'c_sim': c_sim,
            'status': status,
            'val_nll': val_nll,
            'l_cs': l_cs,
            'train_transfers_per_layer': transfers,
            'kendall_tau': tau,
            'policy': spec.label,
            'gamma': spec.gamma if spec.name == 'gamma' else '',
            'C': C,
            'max_tokens': max_tokens,
            'prefetch': bool(prefetch),
            'transfers_per_layer': stats['transfers_per_layer'],
            'hit_rate': stats['hit_rate'],
            'estimated_seconds': stats['estimated_seconds'],
            'tokens_per_s_est': stats['tokens_per_s_est'],
        })

    return rows


async def run_points(jobs, workers):
    """Each job is an isolated (cfg, base_state, point, train, val) tuple; results keep job order."""
    if workers <= 1:
        return [run_sweep_point(*job) for job in jobs]

    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [loop.run_in_executor(pool, run_sweep_point, *job) for job in jobs]
        return await tqdm_asyncio.gather(*futures, desc='sweep')


async def cmd_sweep(cfg, repo):
    train_set, val_set = load_dataset(cfg, repo)
    base = base_model(cfg, repo, train_set, val_set)
    base_state = {k: v.clone() for k, v in base.state_dict().items()}

    points = train_points(cfg.sweep)
    logger.info(f'Sweeping {len(points)} training points x {len(eval_points(cfg.sweep))} evaluation points '
                f'on {cfg.workers} workers')

    jobs = [(cfg, base_state, point, train_set, val_set) for point in points]
    results = await run_points(jobs, cfg.workers)
    rows = [row for point_rows in results for row in point_rows]

    repo.write_csv(SWEEP_FILE, rows, SWEEP_COLUMNS)
    print(f'Wrote {len(rows)} sweep rows to {repo.create_file_path(SWEEP_FILE)}')
    return rows
