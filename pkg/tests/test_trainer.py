import copy
import warnings

import numpy as np
import pytest
import torch

import trainer.train as train_module
from losses.objective import LossWeights
from moe.config import ModelConfig
from moe.layers import ExpertWeights, expert_forward
from moe.model import MoEModel, nll_loss
from trainer.gradients import backward, finite_difference_grad, objective, request_surrogate, set_trainable
from trainer.lora import LoRAAdapter, apply_lora, attach_lora
from trainer.train import TrainConfig, Trainer, freeze_copy, train
from utils.data import SyntheticDatasetSpec, generate_dataset, split_dataset
from utils.errors import NonFiniteError, ShapeError, TrainingDiverged
from utils.seeds import rng_for, torch_generator

# 2 layers, 4 experts, d = d_ff = 4, V = 8: 480 parameters
GRADCHECK_CONFIG = ModelConfig(L=2, E=4, K=2, d=4, d_ff=4, V=8)


def _relative_error(analytic, numeric, floor=1e-3):
    return np.max(np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor))


def _small_dataset(seed=0):
    spec = SyntheticDatasetSpec(n_topics=2, V=16, seqs_per_topic=8, T=10, seed=seed)
    return split_dataset(generate_dataset(spec), val_fraction=0.25)


def _small_model(seed=0):
    return MoEModel(ModelConfig(L=2, E=8, K=2, d=8, d_ff=12, V=16), generator=torch_generator(seed, 'init'))


@pytest.mark.parametrize('seed', range(20))
def test_soft_route_gradients_match_finite_differences(seed):
    model = MoEModel(GRADCHECK_CONFIG, generator=torch_generator(seed, 'init'))
    base = freeze_copy(MoEModel(GRADCHECK_CONFIG, generator=torch_generator(seed + 100, 'init')))
    assert sum(p.numel() for p in model.parameters()) <= 500

    rng = rng_for(seed, 'eval')
    tokens = torch.as_tensor(rng.integers(0, 8, size=5))
    targets = torch.as_tensor(rng.integers(0, 8, size=5))
    weights = LossWeights(lambda_cs=0.5, lambda_rm=0.1, gamma=0.9, C_sim=2)

    _, report = backward(model, (tokens, targets), weights, grad_mode='soft_route', base_model=base)
    numeric = finite_difference_grad(
        lambda: objective(model, tokens, targets, weights, 'soft_route', base_model=base)[0],
        list(model.parameters()),
        epsilon=1e-5
    )

    for (name, _), fd in zip(model.named_parameters(), numeric):
        assert _relative_error(report.grads[name], fd) <= 1e-4, name


def test_zero_weights_reduce_to_nll_gradients(small_model):
    tokens, targets = torch.tensor([1, 2, 3, 4]), torch.tensor([2, 3, 4, 5])
    weights = LossWeights(lambda_cs=0.0, lambda_rm=0.0)
    components, report = backward(small_model, (tokens, targets), weights, base_model=freeze_copy(small_model))

    small_model.zero_grad()
    nll_loss(small_model(tokens)[0], targets).backward()

    assert components.total == components.nll
    for name, param in small_model.named_parameters():
        expected = param.grad.numpy() if param.grad is not None else np.zeros(tuple(param.shape))
        np.testing.assert_allclose(report.grads[name], expected, rtol=1e-12, atol=1e-15)


def test_frozen_parameters_report_zero_gradients(small_model):
    set_trainable(small_model, 'routing')
    _, report = backward(small_model, (torch.tensor([1, 2, 3]), torch.tensor([2, 3, 4])), LossWeights())

    assert not report.grads['embed'].any()
    assert not report.grads['layers.0.experts.0.W_u'].any()
    assert report.grads['layers.0.W_r'].any()


def test_finite_differences_on_simple_functions():
    x = torch.tensor([0.5, -1.5, 2.0], dtype=torch.float64)
    a = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)

    quadratic = finite_difference_grad(lambda: (a * x ** 2).sum(), [x], epsilon=1e-4)[0]
    np.testing.assert_allclose(quadratic, (2 * a * x).numpy(), atol=1e-7)

    linear = finite_difference_grad(lambda: (a * x).sum(), [x], epsilon=1e-3)[0]
    np.testing.assert_allclose(linear, a.numpy(), atol=1e-9)

    with pytest.raises(ValueError):
        finite_difference_grad(lambda: x.sum(), [x], epsilon=0.0)


def test_nll_finite_differences_agree_with_backward(tiny_model):
    tokens, targets = torch.tensor([0, 3, 5, 7]), torch.tensor([3, 5, 7, 1])
    weights = LossWeights(lambda_cs=0.0, lambda_rm=0.0)
    _, report = backward(tiny_model, (tokens, targets), weights)

    params = [tiny_model.embed, tiny_model.head]
    numeric = finite_difference_grad(lambda: nll_loss(tiny_model(tokens)[0], targets), params, epsilon=1e-6)
    assert _relative_error(report.grads['embed'], numeric[0]) <= 1e-6
    assert _relative_error(report.grads['head'], numeric[1]) <= 1e-6


def test_straight_through_surrogate():
    probs = torch.tensor([0.5, 0.3, 0.2], dtype=torch.float64, requires_grad=True)
    requests = torch.tensor([1.0, 1.0, 0.0], dtype=torch.float64)

    surrogate = request_surrogate(probs, requests, K=2, grad_mode='straight_through')
    assert surrogate.tolist() == [1.0, 1.0, 0.0]

    (surrogate * torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)).sum().backward()
    assert probs.grad.tolist() == [1.0, 2.0, 3.0]


def test_objective_rejects_non_finite_nll(small_model, monkeypatch):
    monkeypatch.setattr('trainer.gradients.nll_loss', lambda logits, targets: torch.tensor(float('nan'), dtype=torch.float64))

    with pytest.raises(NonFiniteError) as info:
        objective(small_model, torch.tensor([1, 2]), torch.tensor([2, 3]), LossWeights())

    assert info.value.component == 'l_nll'


def test_lora_zero_init_keeps_weights():
    expert = ExpertWeights(d=4, d_ff=6, generator=torch_generator(0, 'init'))
    adapters = {'W_u': LoRAAdapter(out_dim=6, in_dim=4, rank=2, generator=torch_generator(1, 'init'))}

    effective = apply_lora(expert, adapters)
    assert torch.equal(effective['W_u'], expert.W_u)


def test_lora_rank_one_update_and_dense_oracle():
    expert = ExpertWeights(d=4, d_ff=6, generator=torch_generator(0, 'init'))
    adapter = LoRAAdapter(out_dim=6, in_dim=4, rank=1, alpha=2.0, generator=torch_generator(1, 'init'))
    with torch.no_grad():
        adapter.B.copy_(torch.randn(6, 1, generator=torch_generator(2, 'init'), dtype=torch.float64))

    effective = apply_lora(expert, {'W_u': adapter})
    delta = (effective['W_u'] - expert.W_u).detach()
    expected = 2.0 * adapter.B.detach().numpy() @ adapter.A.detach().numpy()

    assert torch.linalg.matrix_rank(delta).item() == 1
    np.testing.assert_allclose(delta.numpy(), expected, rtol=1e-12)


def test_lora_shape_mismatch():
    expert = ExpertWeights(d=4, d_ff=6)
    with pytest.raises(ShapeError):
        apply_lora(expert, {'W_u': LoRAAdapter(out_dim=4, in_dim=6, rank=1)})


def test_attached_lora_flows_through_expert_forward():
    model = _small_model()
    attach_lora(model, rank=2, alpha=4.0, generator=torch_generator(0, 'init', 1))
    expert = model.layers[0].experts[0]
    with torch.no_grad():
        expert.adapters['W_d'].B.fill_(0.1)

    x = torch.randn(8, generator=torch_generator(3, 'eval'), dtype=torch.float64)
    with torch.no_grad():
        weights = apply_lora(expert, expert.adapters)
        hidden = torch.nn.functional.silu(x @ expert.W_g.T) * (x @ weights['W_u'].T)
        torch.testing.assert_close(expert_forward(expert, x), hidden @ weights['W_d'].T)

    set_trainable(model, 'routing')
    trainable = {n for n, p in model.named_parameters() if p.requires_grad}
    assert 'layers.0.experts.0.adapters.W_d.B' in trainable
    assert 'layers.0.experts.0.W_d' not in trainable


def test_zero_epochs_leave_model_unchanged():
    train_set, val_set = _small_dataset()
    model = _small_model()
    before = copy.deepcopy(model.state_dict())

    _, history = train(model, train_set, TrainConfig(epochs=0), val_set=val_set)

    assert len(history) == 0
    for name, value in model.state_dict().items():
        assert torch.equal(value, before[name])


def test_same_seed_gives_identical_history():
    train_set, val_set = _small_dataset()
    cfg = TrainConfig(epochs=2, batch_size=4, val_sequences=4)

    first_model, first = train(_small_model(), train_set, cfg, val_set=val_set)
    second_model, second = train(_small_model(), train_set, cfg, val_set=val_set)

    assert first == second
    for name, value in first_model.state_dict().items():
        assert torch.equal(value, second_model.state_dict()[name])


def test_history_records_validation_metrics():
    train_set, val_set = _small_dataset()
    _, history = train(_small_model(), train_set, TrainConfig(epochs=1, batch_size=4, val_sequences=4), val_set=val_set)

    metrics = history[0]
    assert metrics.epoch == 1
    assert np.isfinite(metrics.val_nll)
    assert len(metrics.transfers_by_layer) == 2
    assert -1.0 <= metrics.kendall_tau <= 1.0
    assert history.rows()[0]['transfers_by_layer'].count(';') == 1


def test_divergence_keeps_last_good_state(monkeypatch):
    train_set, val_set = _small_dataset()
    model = _small_model()
    real_objective = train_module.objective
    calls = {'n': 0}
    steps_per_epoch = -(-len(train_set) // 4)

    def flaky_objective(**kwargs):
        calls['n'] += 1
        if calls['n'] > steps_per_epoch:
            raise NonFiniteError('l_cs', float('nan'))

        return real_objective(**kwargs)

    monkeypatch.setattr(train_module, 'objective', flaky_objective)
    trainer = Trainer(model=model, cfg=TrainConfig(epochs=3, batch_size=4, val_sequences=4), base_model=freeze_copy(model))

    with pytest.raises(TrainingDiverged) as info:
        trainer.fit(train_set, val_set)

    assert info.value.epoch == 2
    assert info.value.component == 'l_cs'
    assert len(trainer.history) == 1
    assert set(info.value.last_good_state) == set(model.state_dict())


def test_learning_rate_schedule_warms_up_then_decays():
    model = _small_model()
    trainer = Trainer(model=model, cfg=TrainConfig(epochs=1, learning_rate=1e-2, warmup_ratio=0.25), base_model=freeze_copy(model))
    scheduler = trainer._make_scheduler(steps_per_epoch=8)
    lrs = []

    for _ in range(8):
        lrs.append(trainer.optimizer.param_groups[0]['lr'])
        trainer.optimizer.step()
        scheduler.step()

    assert lrs[0] == pytest.approx(0.5e-2)
    assert lrs[1] == pytest.approx(1e-2)
    assert lrs[-1] < lrs[2]


def test_zero_learning_rate_leaves_weights_bit_identical():
    train_set, val_set = _small_dataset()
    model = _small_model()
    before = copy.deepcopy(model.state_dict())

    train(model, train_set, TrainConfig(epochs=2, batch_size=4, learning_rate=0.0, val_sequences=4), val_set=val_set)

    for name, value in model.state_dict().items():
        assert torch.equal(value, before[name]), name


def test_zero_weights_follow_the_plain_nll_trajectory():
    train_set, _ = _small_dataset()
    cfg = TrainConfig(epochs=2, learning_rate=1e-2, batch_size=len(train_set), warmup_ratio=0.0, param_policy='all',
                      weights=LossWeights(lambda_cs=0.0, lambda_rm=0.0))
    trained, history = train(_small_model(), train_set, cfg)

    reference = _small_model()
    optimizer = torch.optim.AdamW(set_trainable(reference, 'all'), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    losses = []

    # one full batch per epoch, linear decay over two steps
    for epoch, factor in enumerate((1.0, 0.5)):
        order = rng_for(cfg.seed, 'order', epoch).permutation(len(train_set))
        tokens, targets = train_module.batch_tensors([train_set[i] for i in order])

        optimizer.param_groups[0]['lr'] = cfg.learning_rate * factor
        optimizer.zero_grad(set_to_none=True)
        loss = nll_loss(reference(tokens)[0], targets)
        loss.backward()
        optimizer.step()
        losses.append(loss.item())

    assert [m.l_nll for m in history] == losses
    for name, value in trained.state_dict().items():
        assert torch.equal(value, reference.state_dict()[name]), name


def test_training_does_not_warn_about_scalar_conversion():
    train_set, val_set = _small_dataset()

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always')
        train(_small_model(), train_set, TrainConfig(epochs=1, batch_size=4, val_sequences=4), val_set=val_set)

    assert not [w for w in caught if 'requires_grad' in str(w.message)]


@pytest.mark.slow
def test_large_cache_weight_reduces_transfers():
    spec = SyntheticDatasetSpec(n_topics=2, V=64, seqs_per_topic=32, T=32, seed=0)
    train_set, val_set = split_dataset(generate_dataset(spec))
    base = MoEModel(ModelConfig(), generator=torch_generator(0, 'init'))
    train(base, train_set, TrainConfig(epochs=5, learning_rate=3e-3, param_policy='all',
                                       weights=LossWeights(lambda_cs=0.0, lambda_rm=0.0)), val_set=val_set)

    results = {}
    for lambda_cs in (0.0, 5.0):
        model = copy.deepcopy(base)
        cfg = TrainConfig(epochs=3, learning_rate=1e-2, weights=LossWeights(lambda_cs=lambda_cs, lambda_rm=0.1))
        _, history = train(model, train_set, cfg, val_set=val_set, base_model=freeze_copy(base))
        results[lambda_cs] = history[-1].transfers_per_layer

    assert results[5.0] < results[0.0]
