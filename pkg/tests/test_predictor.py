import numpy as np
import pytest
import torch

from moe.model import greedy_decode
from moe.trace import RoutingTrace
from predictor.embedding import embed_prompt
from predictor.mlp import FULL_SCALE_PREDICTOR, PredictorConfig, PredictorMLP, dataset_kl, predict_prefetch, train_predictor
from predictor.plan import PrefetchPlan, oracle_prefetch, plan_from_scores, prefetch_hit_rate, random_prefetch
from predictor.targets import PredictorDataset, PredictorExample, build_targets, preference_target
from utils.errors import ShapeError
from utils.seeds import rng_for


def test_embed_prompt_is_deterministic_and_normalized():
    a = embed_prompt([3, 1, 4, 1, 5])
    b = embed_prompt([3, 1, 4, 1, 5])

    np.testing.assert_array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)


def test_embed_prompt_bag_property():
    tokens = [9, 2, 6, 5, 3]
    np.testing.assert_allclose(embed_prompt(tokens, damping=1.0), embed_prompt(tokens[::-1], damping=1.0))
    assert not np.allclose(embed_prompt(tokens), embed_prompt(tokens[::-1]))


def test_embed_prompt_rejects_empty():
    with pytest.raises(ShapeError):
        embed_prompt([])


def test_single_step_target_is_that_steps_probs(small_model):
    dataset = build_targets(small_model, [[1, 2, 3]], gen_len=1, d_emb=16)
    result = greedy_decode(small_model, [1, 2, 3], max_tokens=1)

    np.testing.assert_allclose(dataset[0].target, result.trace.probs[:, 3], atol=1e-12)
    np.testing.assert_allclose(dataset[0].target.sum(axis=1), 1.0)


def test_targets_match_trace_averaging(small_model):
    prompts = [[1, 2], [5, 6, 7], [9]]
    dataset = build_targets(small_model, prompts, gen_len=4, d_emb=16)

    assert len(dataset) == 3 and dataset.skipped == 0
    for example, prompt in zip(dataset, prompts):
        trace = greedy_decode(small_model, prompt, max_tokens=4).trace
        mean = trace.probs[:, len(prompt):].mean(axis=1)
        np.testing.assert_allclose(example.target, mean / mean.sum(axis=1, keepdims=True), atol=1e-12)
        np.testing.assert_array_equal(example.embedding, embed_prompt(prompt, d_emb=16))


def test_build_targets_skips_bad_prompts(small_model):
    dataset = build_targets(small_model, [[1, 2], [], [3]], gen_len=2, d_emb=16)
    assert len(dataset) == 2
    assert dataset.skipped == 1


def test_preference_target_needs_generated_positions(small_model):
    result = greedy_decode(small_model, [1, 2], max_tokens=0)
    with pytest.raises(ShapeError):
        preference_target(result.trace, result.n_prompt)


def test_single_example_is_memorized():
    target = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
    dataset = PredictorDataset([PredictorExample(embedding=embed_prompt([1, 2, 3], d_emb=8), target=target)])
    mlp = train_predictor(dataset, PredictorConfig(d_emb=8, hidden=16, learning_rate=0.1, epochs=300, batch_size=1))

    assert mlp.loss_history[-1] < 1e-3
    assert mlp.loss_history[-1] < mlp.loss_history[0]


def test_zero_output_layer_predicts_uniform():
    L, E = 2, 4
    mlp = PredictorMLP(d_emb=8, hidden=8, L=L, E=E)
    with torch.no_grad():
        mlp.fc2.weight.zero_()
        mlp.fc2.bias.zero_()

    target = rng_for(0, 'eval').dirichlet(np.ones(E), size=L)
    emb = embed_prompt([4, 2], d_emb=8)
    dataset = [PredictorExample(embedding=emb, target=target)]

    np.testing.assert_allclose(mlp.predict(emb), np.full((L, E), 1.0 / E))
    expected = np.mean((target * np.log(target * E)).sum(axis=1))
    assert dataset_kl(mlp, dataset) == pytest.approx(expected)


def test_predictor_presets():
    assert (FULL_SCALE_PREDICTOR.d_emb, FULL_SCALE_PREDICTOR.hidden) == (768, 1024)
    assert FULL_SCALE_PREDICTOR.learning_rate == 2e-4
    assert (FULL_SCALE_PREDICTOR.momentum, FULL_SCALE_PREDICTOR.epochs, FULL_SCALE_PREDICTOR.batch_size) == (0.9, 10, 16)


def test_plan_from_scores():
    scores = np.array([[0.1, 0.4, 0.4, 0.1], [0.3, 0.2, 0.1, 0.4]])
    plan = plan_from_scores(scores, C=2)

    assert plan.sets == [frozenset({1, 2}), frozenset({0, 3})]
    assert plan_from_scores(scores, C=4).sets == [frozenset(range(4))] * 2

    with pytest.raises(ShapeError):
        plan_from_scores(scores, C=5)


def test_predict_prefetch_is_deterministic(small_model):
    dataset = build_targets(small_model, [[1, 2], [3, 4]], gen_len=3, d_emb=16)
    mlp = train_predictor(dataset, PredictorConfig(d_emb=16, hidden=16, epochs=3, batch_size=2))
    emb = embed_prompt([1, 2], d_emb=16)

    assert predict_prefetch(mlp, emb, 3).sets == predict_prefetch(mlp, emb, 3).sets
    assert predict_prefetch(mlp, emb, 8).sets == [frozenset(range(8))] * 2


def test_memorized_prompt_plan_contains_true_top_experts(small_model):
    prompt = [3, 7, 11]
    dataset = build_targets(small_model, [prompt], gen_len=6, d_emb=16)
    mlp = train_predictor(dataset, PredictorConfig(d_emb=16, hidden=32, learning_rate=0.1, epochs=400, batch_size=1))

    plan = predict_prefetch(mlp, dataset[0].embedding, 2)
    truth = plan_from_scores(dataset[0].target, 2)
    # near-tied layers may swap
    for l, row in enumerate(dataset[0].target):
        top = np.sort(row)[::-1]
        if top[1] - top[2] > 0.05:
            assert plan.sets[l] == truth.sets[l]


def test_random_and_oracle_prefetch(small_model):
    rng = rng_for(0, 'prefetch')
    plan = random_prefetch(L=2, E=8, C=3, rng=rng)
    plan.validate(E=8, C=3)

    trace = greedy_decode(small_model, [1, 2, 3], max_tokens=5).trace
    oracle = oracle_prefetch(trace, 8)
    assert prefetch_hit_rate(oracle, trace) == 1.0
    assert 0.0 <= prefetch_hit_rate(plan, trace) <= 1.0


def test_oracle_ranks_experts_by_request_count():
    requests = np.zeros((1, 4, 4))
    requests[0, :, 3] = 1.0
    requests[0, :3, 2] = 1.0
    requests[0, 3, 0] = 1.0
    probs = np.tile([0.4, 0.1, 0.25, 0.25], (1, 4, 1))
    trace = RoutingTrace(probs=probs, requests=requests)

    assert oracle_prefetch(trace, 2).sets == [frozenset({2, 3})]
    assert oracle_prefetch(trace, 3).sets == [frozenset({0, 2, 3})]


@pytest.mark.parametrize('transform', [lambda s: 3.0 * s + 1.0, np.exp, lambda s: s ** 3])
def test_plans_ignore_monotone_rescaling(rng, transform):
    scores = rng.normal(size=(4, 16))
    plan = plan_from_scores(scores, 5)

    assert plan_from_scores(transform(scores), 5).sets == plan.sets


def test_prefetch_hit_rate_counts_requested_experts(small_model):
    trace = greedy_decode(small_model, [4], max_tokens=3).trace
    first = [set(np.flatnonzero(trace.requests[l, 0]).tolist()) for l in range(trace.L)]
    plan = PrefetchPlan(sets=[frozenset(s) for s in first])

    expected = sum(len(first[l] & set(np.flatnonzero(trace.requests[l, t]).tolist()))
                   for l in range(trace.L) for t in range(trace.T)) / trace.requests.sum()
    assert prefetch_hit_rate(plan, trace) == pytest.approx(expected)


def test_plan_validation():
    with pytest.raises(ShapeError):
        PrefetchPlan(sets=[frozenset({0, 1})]).validate(E=4, C=3)

    with pytest.raises(ShapeError):
        PrefetchPlan(sets=[frozenset({0, 9, 2})]).validate(E=4, C=3)
