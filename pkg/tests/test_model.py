import numpy as np
import pytest

from gradcheck import max_relative_error, random_batches
from uniteqe.corpus import Dataset, Example, InputFormat, LanguagePair, build_input
from uniteqe.errors import CheckpointError, DataError, NumericalError
from uniteqe.model import (
    CHECKPOINT_MAGIC,
    PRESETS,
    ModelConfig,
    TrainHyper,
    batch_loss_and_grads,
    checkpoint_bytes,
    encode,
    forward,
    hidden_activations,
    init_state,
    load_checkpoint,
    loss,
    loss_and_grads,
    make_batch,
    predict,
    same_parameters,
    save_checkpoint,
    train,
    train_epoch,
    train_step,
    with_metadata,
    zero_state,
)

LP = LanguagePair("xx", "yy")
TINY = PRESETS["tiny"]
TINY_SEG = ModelConfig(d=8, buckets=64, head_dims=(16, 8, 1), encoder_kind="segment_mean")


def data(n=12, seed=0, scored=True):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(30)]
    sent = lambda: " ".join(rng.choice(words, size=int(rng.integers(2, 8))))  # noqa: E731
    return Dataset([Example(f"d{i}", LP, sent(), sent(), sent(), float(rng.normal()) if scored else None)
                    for i in range(n)])


def states_equal(a, b):
    return same_parameters(a, b) and a.step == b.step and all(
        np.array_equal(a.adam_m[k], b.adam_m[k]) and np.array_equal(a.adam_v[k], b.adam_v[k]) for k in a.params)


# ---------------------------------------------------------------- config and init


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(head_dims=(4, 2))
    with pytest.raises(ValueError):
        ModelConfig(lr_head=0)
    with pytest.raises(ValueError):
        ModelConfig(d=0)
    with pytest.raises(ValueError):
        ModelConfig(encoder_kind="transformer")


def test_large_presets_documented():
    assert PRESETS["xlmr-large"].head_dims == (3072, 1024, 1)
    assert (PRESETS["xlmr-large"].lr_encoder, PRESETS["xlmr-large"].lr_head) == (1e-5, 3e-5)
    assert PRESETS["infoxlm-large"].lr_encoder == PRESETS["xlmr-large"].lr_encoder / 2


def test_init_shapes_and_bounds():
    state = init_state(TINY_SEG)
    p = state.params
    assert p["embedding"].shape == (64 + 4, 8)
    assert p["encoder.weight"].shape == (8, 8)
    assert [p[f"head.{k}.weight"].shape for k in range(3)] == [(16, 8), (8, 16), (1, 8)]
    for name, arr in p.items():
        if name.endswith("bias"):
            assert not arr.any()
        else:
            assert np.abs(arr).max() <= 1 / np.sqrt(8)


# ---------------------------------------------------------------- forward


def test_zero_parameters_predict_zero():
    state = zero_state(TINY)
    for ex in data(5):
        for fmt in InputFormat:
            assert forward(state, build_input(ex, fmt, state.vocab)) == 0.0


def test_forward_deterministic_and_batch_consistent():
    state = init_state(TINY_SEG, seed=3)
    ds = data(6)
    seqs = [build_input(ex, "src", state.vocab) for ex in ds]
    single = [forward(state, s) for s in seqs]
    assert single == [forward(state, s) for s in seqs]
    assert predict(state, ds).tolist() == single
    from uniteqe.model import forward_batch
    np.testing.assert_allclose(forward_batch(state, make_batch(ds.examples, "src", state.vocab, False)), single, atol=1e-12)


def test_encode_shape_and_cls_row():
    state = init_state(TINY, seed=1)
    seq = build_input(data(1)[0], "src+ref", state.vocab)
    H = encode(state, seq)
    assert H.shape == (len(seq), 8)
    from uniteqe.model import pad_sequences
    ids, lengths, segs = pad_sequences([seq], 0)
    h, _ = state.encoder.pool(state.params, ids, lengths, segs)
    np.testing.assert_allclose(h[0], H[0], atol=1e-12)


def test_permuting_content_tokens_mean_context():
    state = init_state(TINY, seed=2)
    a = Example("a", LP, "eins zwei drei", "one two three four", "x")
    b = Example("b", LP, "drei eins zwei", "four three one two", "x")
    pa = forward(state, build_input(a, "src", state.vocab))
    pb = forward(state, build_input(b, "src", state.vocab))
    assert pa == pytest.approx(pb, abs=1e-12)


def test_out_of_range_id():
    state = init_state(TINY)
    batch = make_batch(data(2).examples, "src", PRESETS["desk"].vocab, False)
    from uniteqe.model import forward_batch
    with pytest.raises(DataError, match="out of range"):
        forward_batch(state, batch)


def test_hidden_activations_in_tanh_range():
    state = init_state(TINY, seed=4)
    for arr in state.params.values():
        arr *= 30.0
    acts = hidden_activations(state, make_batch(data(8).examples, "src", state.vocab))
    assert len(acts) == 2
    for a in acts:
        assert np.all(np.abs(a) <= 1.0)


# ---------------------------------------------------------------- loss and gradients


@pytest.mark.parametrize("p,q,expected", [(0.7, 0.7, 0.0), (0.5, 1.0, 0.25), (-1, 1, 4)])
def test_loss_values(p, q, expected):
    assert loss(p, q) == expected


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("config", [TINY, TINY_SEG], ids=["mean_context", "segment_mean"])
def test_gradients_match_finite_differences(seed, config):
    state, batches = random_batches(seed, config=config)
    assert max_relative_error(state, batches) < 1e-4


def test_loss_additivity_and_non_negativity():
    state, batches = random_batches(7)
    losses, grads = loss_and_grads(state, *batches)
    separate = [batch_loss_and_grads(state, b) for b in batches]
    assert losses.total == sum(v for v, _ in separate)
    assert (losses.ref, losses.src, losses.src_ref) == tuple(v for v, _ in separate)
    assert all(v >= 0 for v, _ in separate)
    for name in grads:
        np.testing.assert_allclose(grads[name], sum(g[name] for _, g in separate), atol=1e-15)


def test_exact_targets_give_zero_loss():
    state = init_state(TINY, seed=1)
    ds = data(4)
    preds = predict(state, ds)
    exact = Dataset([ex.with_score(float(p)) for ex, p in zip(ds, preds)])
    value, _ = batch_loss_and_grads(state, make_batch(exact.examples, "src", state.vocab))
    assert value == pytest.approx(0.0, abs=1e-28)


# ---------------------------------------------------------------- train_step


def test_zero_state_zero_targets_stays_zero():
    state = zero_state(TINY)
    ds = Dataset([ex.with_score(0.0) for ex in data(4)])
    batches = [make_batch(ds.examples, f, state.vocab) for f in ("ref", "src", "src+ref")]
    _, losses = train_step(state, *batches)
    assert losses.total == 0.0
    assert all(not arr.any() for arr in state.params.values())
    assert state.step == 1


def test_train_step_updates_and_reports_sum():
    state, batches = random_batches(2)
    before = state.copy()
    _, losses = train_step(state, *batches)
    assert losses.total == losses.ref + losses.src + losses.src_ref
    assert not same_parameters(state, before)


def test_train_step_learning_rate_groups():
    state, batches = random_batches(3)
    before = state.copy()
    train_step(state, *batches, lr_encoder=1e-300, lr_head=1e-2)
    for name in state.params:
        changed = np.abs(state.params[name] - before.params[name]).max()
        if name.startswith(("embedding", "encoder.")):
            assert changed < 1e-290
        elif name.endswith("weight"):
            assert changed > 1e-4


def test_unequal_batches_rejected():
    state = init_state(TINY)
    ds = data(5)
    with pytest.raises(ValueError, match="same size"):
        train_step(state, make_batch(ds.examples[:2], "ref", state.vocab), make_batch(ds.examples[:3], "src", state.vocab))


def test_unscored_example_rejected():
    with pytest.raises(DataError, match="no score"):
        make_batch(data(3, scored=False).examples, "src", TINY.vocab)
    with pytest.raises(DataError, match="no score"):
        train_epoch(init_state(TINY), data(3, scored=False), "src", TrainHyper(), seed=0)


def test_non_finite_loss_leaves_state_untouched():
    state = init_state(TINY, seed=5)
    state.params["head.2.weight"][...] = 1e200
    before = state.copy()
    batch = make_batch(data(4).examples, "src", state.vocab)
    with pytest.raises(NumericalError, match="non-finite"):
        train_step(state, batch_src=batch)
    assert states_equal(state, before)


# ---------------------------------------------------------------- epochs


def test_empty_epoch_is_noop():
    state = init_state(TINY)
    before = state.copy()
    train_epoch(state, Dataset([]), "all", TrainHyper(), seed=0)
    assert states_equal(state, before)


def test_single_format_epoch_touches_only_src():
    seen = []
    state = init_state(TINY)
    train_epoch(state, data(10), "src", TrainHyper(batch_size=3), seed=0,
                on_step=lambda batches, losses: seen.append((set(batches), losses)))
    assert len(seen) == 4
    for formats, losses in seen:
        assert formats == {InputFormat.SRC}
        assert losses.ref is None and losses.src_ref is None and losses.total == losses.src


def test_all_format_epoch_uses_three_disjoint_parts():
    ids = {f: set() for f in InputFormat}
    state = init_state(TINY)
    train_epoch(state, data(12), "all", TrainHyper(batch_size=2), seed=1,
                on_step=lambda batches, _: [ids[f].update(b.example_ids) for f, b in batches.items()])
    assert all(len(v) == 4 for v in ids.values())
    assert not (ids[InputFormat.SRC] & ids[InputFormat.REF])
    assert not (ids[InputFormat.REF] & ids[InputFormat.SRC_REF])


def test_training_deterministic():
    runs = []
    for _ in range(2):
        state = init_state(TINY_SEG, seed=1)
        train(state, data(20), "all", TrainHyper(epochs=2, batch_size=4), seed=9)
        runs.append(state)
    assert checkpoint_bytes(runs[0]) == checkpoint_bytes(runs[1])
    other = init_state(TINY_SEG, seed=1)
    train(other, data(20), "all", TrainHyper(epochs=2, batch_size=4), seed=10)
    assert not same_parameters(other, runs[0])


def test_training_reduces_loss():
    state = init_state(ModelConfig(d=16, buckets=1024, head_dims=(16, 1), lr_encoder=1e-2, lr_head=1e-2,
                                   encoder_kind="segment_mean"), seed=0)
    ds = data(24)
    batch = make_batch(ds.examples, "src", state.vocab)
    start = batch_loss_and_grads(state, batch)[0]
    train(state, ds, "src", TrainHyper(epochs=30, batch_size=8), seed=0)
    assert batch_loss_and_grads(state, batch)[0] < 0.5 * start


# ---------------------------------------------------------------- prediction


def test_predict_order_invariant_and_pure():
    state = init_state(TINY_SEG, seed=6)
    ds = data(9)
    before = state.copy()
    a = predict(state, ds)
    assert np.array_equal(a, predict(state, ds))
    perm = np.random.default_rng(0).permutation(len(ds))
    b = predict(state, Dataset([ds[int(i)] for i in perm]))
    assert np.array_equal(a[perm], b)
    assert states_equal(state, before)


def test_predict_names_bad_example():
    ds = Dataset([Example("noref", LP, "s", "h", None)])
    with pytest.raises(DataError, match="noref"):
        predict(init_state(TINY), ds, "ref")


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    state = init_state(TINY_SEG, seed=2)
    train(state, data(12), "all", TrainHyper(epochs=1, batch_size=2), seed=0)
    with_metadata(state, stage="pretrain", seed=0)
    path = save_checkpoint(state, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert states_equal(state, back)
    assert back.config == state.config
    assert back.metadata == {"stage": "pretrain", "seed": 0}
    ds = data(7, seed=3)
    assert np.array_equal(predict(back, ds), predict(state, ds))
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_layout_and_errors(tmp_path):
    blob = checkpoint_bytes(init_state(TINY))
    assert blob[:8] == CHECKPOINT_MAGIC
    wrong = tmp_path / "v.ckpt"
    wrong.write_bytes(blob[:8] + (7).to_bytes(4, "little") + blob[12:])
    with pytest.raises(CheckpointError, match="version 7.*expected 1"):
        load_checkpoint(wrong)
    bad = tmp_path / "c.ckpt"
    bad.write_bytes(blob[:-1] + bytes([blob[-1] ^ 1]))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(bad)
    junk = tmp_path / "j.ckpt"
    junk.write_bytes(b"hello")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(junk)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
