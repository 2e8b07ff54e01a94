import numpy as np
import pytest

from gaborcnn import data, gabor, train
from gaborcnn.errors import CheckpointError, ConfigError, NumericError
from gaborcnn.layers import Conv, Dense, GaborConv
from gaborcnn.train import (
    DEFAULT_GCNN,
    ExperimentConfig,
    build_network,
    cnn_twin_specs,
    epochs_to_threshold,
    evaluate,
    load_checkpoint,
    load_tensors,
    moving_average,
    network_spec_text,
    parse_config_text,
    parse_network_spec,
    run_paired_experiment,
    run_training,
    save_checkpoint,
    save_tensors,
)

SMALL_NET = (
    "gabor_conv(out=8, k=5, stride=1, pad=2); relu; maxpool(window=2, stride=2); "
    "flatten; dense(out=num_classes); softmax_ce"
)


def _small_config(tmp_path=None, **overrides):
    kwargs = dict(
        network=SMALL_NET,
        seed=3,
        epochs=2,
        batch_size=16,
        image_size=12,
        optimizer="adam",
    )
    kwargs.update(overrides)
    if tmp_path is not None:
        kwargs.setdefault("out_dir", str(tmp_path / "run"))
    return ExperimentConfig(**kwargs).validate()


def _small_data(seed=0, n=40, size=12, classes=2):
    ds = data.gen_texture_dataset(n // classes, size, classes, 0.05, seed)
    tr, va = data.split(ds, data.SplitSpec(0.25, seed))
    tr = data.normalize(tr)
    va = data.normalize(va, stats_from=tr.stats)
    return tr, va


# ---------------------------------------------------------------------------
# network spec / build


def test_parse_default_spec_round_trips():
    specs = parse_network_spec(DEFAULT_GCNN)
    assert parse_network_spec(network_spec_text(specs)) == specs


def test_parse_rejects_unknown_layer_and_args():
    with pytest.raises(ConfigError):
        parse_network_spec("wibble(out=3)")
    with pytest.raises(ConfigError):
        parse_network_spec("conv(out=3, k=3, zap=1)")
    with pytest.raises(ConfigError):
        parse_network_spec("dense()")  # missing out


def test_build_dense_only_network_param_count():
    net = build_network("flatten; dense(out=num_classes); softmax_ce", (1, 2, 2), 2, 0)
    total = sum(p.size for p, _ in net.parameters())
    assert total == 4 * 2 + 2  # 8 weights + 2 biases


def test_build_default_gcnn_on_32x32():
    net = build_network(DEFAULT_GCNN, (1, 32, 32), 4, 0)
    logits = net.forward_logits(np.zeros((2, 1, 32, 32)))
    assert logits.shape == (2, 4)


def test_build_identical_seeds_identical_params():
    a = build_network(SMALL_NET, (1, 12, 12), 2, 5)
    b = build_network(SMALL_NET, (1, 12, 12), 2, 5)
    for (pa, _), (pb, _) in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa, pb)


def test_build_shape_error_names_layer_and_chain():
    with pytest.raises(ConfigError) as exc:
        build_network(
            "conv(out=4, k=5); relu; maxpool(window=9, stride=9); flatten; "
            "dense(out=num_classes); softmax_ce",
            (1, 8, 8), 2, 0,
        )
    msg = str(exc.value)
    assert "maxpool" in msg and "chain" in msg


def test_build_rejects_late_gabor_conv():
    with pytest.raises(ConfigError):
        build_network(
            "conv(out=2, k=3, pad=1); gabor_conv(out=2, k=3, pad=1); relu; "
            "flatten; dense(out=num_classes); softmax_ce",
            (1, 6, 6), 2, 0,
        )


def test_build_rejects_two_gabor_convs():
    with pytest.raises(ConfigError):
        build_network(
            "gabor_conv(out=2, k=3, pad=1); gabor_conv(out=2, k=3, pad=1); "
            "flatten; dense(out=num_classes); softmax_ce",
            (1, 6, 6), 2, 0,
        )


def test_cnn_twin_same_shapes_everywhere():
    gcnn = build_network(DEFAULT_GCNN, (1, 32, 32), 4, 0)
    twin_text = network_spec_text(cnn_twin_specs(parse_network_spec(DEFAULT_GCNN)))
    cnn = build_network(twin_text, (1, 32, 32), 4, 0)
    x = np.random.default_rng(0).normal(size=(2, 1, 32, 32))
    a, b = x, x
    for la, lb in zip(gcnn.layers, cnn.layers):
        a = la.forward(a)
        b = lb.forward(b)
        assert np.shape(a) == np.shape(b)
    assert isinstance(cnn.layers[0], Conv)
    assert isinstance(gcnn.layers[0], GaborConv)


# ---------------------------------------------------------------------------
# metrics helpers


def test_moving_average_examples():
    assert moving_average([2.0] * 6, 5) == [2.0] * 6
    np.testing.assert_allclose(
        moving_average([1, 2, 3, 4, 5, 6], 5), [1, 1.5, 2, 2.5, 3, 4]
    )
    series = [0.3, 0.9, 0.1]
    assert moving_average(series, 1) == series
    assert moving_average([], 5) == []


def test_moving_average_never_exceeds_running_max():
    rng = np.random.default_rng(0)
    series = list(rng.uniform(size=30))
    ma = moving_average(series, 5)
    running_max = np.maximum.accumulate(series)
    assert (np.asarray(ma) <= running_max + 1e-15).all()


def test_epochs_to_threshold():
    assert epochs_to_threshold([0.1, 0.5, 0.95, 0.99], 0.9) == 3
    assert epochs_to_threshold([0.1, 0.2], 0.9) is None


# ---------------------------------------------------------------------------
# training / evaluation behavior


def test_evaluate_constant_net_matches_labels():
    net = build_network("flatten; dense(out=num_classes); softmax_ce", (1, 2, 2), 2, 0)
    # bias strongly favors class 1
    dense = net.layers[-1]
    assert isinstance(dense, Dense)
    dense.weight[...] = 0.0
    dense.bias[...] = [0.0, 10.0]
    images = np.random.default_rng(1).normal(size=(6, 1, 2, 2))
    ds = data.LabeledDataset(images, np.ones(6, dtype=np.int64), ["a", "b"])
    _, acc = evaluate(net, ds)
    assert acc == 1.0


def test_untrained_net_near_chance():
    accs = []
    for seed in range(5):
        tr, _ = _small_data(seed=seed, n=200)
        net = build_network(SMALL_NET, (1, 12, 12), 2, seed)
        _, acc = evaluate(net, tr)
        accs.append(acc)
    assert 0.35 <= np.mean(accs) <= 0.65


def test_single_batch_overfit():
    ds = data.gen_texture_dataset(8, 12, 2, 0.05, seed=1)
    ds = data.normalize(ds)
    cfg = _small_config(epochs=200, batch_size=16)
    metrics, net, _ = run_training(cfg, ds, ds)
    assert metrics[-1].train_acc == 1.0


def test_training_deterministic():
    tr, va = _small_data()
    cfg = _small_config()
    m1, n1, _ = run_training(cfg, tr, va)
    m2, n2, _ = run_training(cfg, tr, va)
    for a, b in zip(m1, m2):
        assert (a.train_loss, a.train_acc, a.val_loss, a.val_acc) == (
            b.train_loss, b.train_acc, b.val_loss, b.val_acc
        )
    for (pa, _), (pb, _) in zip(n1.parameters(), n2.parameters()):
        np.testing.assert_array_equal(pa, pb)


def test_non_finite_loss_aborts_with_batch_index():
    tr, va = _small_data()
    cfg = _small_config(lr=1e300, epochs=1, optimizer="sgd")
    with np.errstate(all="ignore"), pytest.raises(NumericError) as exc:
        run_training(cfg, tr, va)
    assert "batch" in str(exc.value)


def test_lr_decay_schedule():
    cfg = _small_config(lr=0.1, lr_decay=[(2, 10.0), (3, 10.0)])
    assert train.current_lr(cfg, 1) == pytest.approx(0.1)
    assert train.current_lr(cfg, 2) == pytest.approx(0.01)
    assert train.current_lr(cfg, 3) == pytest.approx(0.001)


# ---------------------------------------------------------------------------
# checkpoints


def test_tensor_file_round_trip_byte_identical(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {
        "a/w": rng.normal(size=(3, 4)),
        "b/x": rng.normal(size=(2, 1, 2, 2)),
        "t": np.array([7.0]),
    }
    p1, p2 = tmp_path / "a.gnet", tmp_path / "b.gnet"
    save_tensors(p1, tensors)
    loaded = load_tensors(p1)
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])
    save_tensors(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_magic_and_truncation_errors(tmp_path):
    p = tmp_path / "bad.gnet"
    p.write_bytes(b"NOPE!")
    with pytest.raises(CheckpointError) as exc:
        load_tensors(p)
    assert exc.value.code == "bad_magic"

    good = tmp_path / "good.gnet"
    save_tensors(good, {"x": np.ones(4)})
    raw = good.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError) as exc:
        load_tensors(p)
    assert exc.value.code == "truncated"


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    tr, va = _small_data()
    cfg = _small_config()
    _, net, opt = run_training(cfg, tr, va)
    path = tmp_path / "ck.gnet"
    save_checkpoint(net, opt, cfg.epochs, path)

    other = build_network(
        "gabor_conv(out=4, k=5, stride=1, pad=2); relu; "
        "maxpool(window=2, stride=2); flatten; dense(out=num_classes); softmax_ce",
        (1, 12, 12), 2, 0,
    )
    with pytest.raises(CheckpointError) as exc:
        load_checkpoint(other, path)
    assert exc.value.code == "shape_mismatch"
    assert "layer00" in str(exc.value)


def test_checkpoint_resume_bit_exact(tmp_path):
    tr, va = _small_data(n=48)
    cfg = _small_config(epochs=4)

    # uninterrupted run
    full_metrics, full_net, _ = run_training(cfg, tr, va)

    # stop after 2 epochs, checkpoint, reload, continue
    cfg2 = _small_config(epochs=2)
    part_metrics, part_net, part_opt = run_training(cfg2, tr, va)
    path = tmp_path / "resume.gnet"
    save_checkpoint(part_net, part_opt, 2, path)

    fresh = build_network(cfg.network, (1, 12, 12), 2, cfg.seed)
    fresh_opt = train.make_optimizer(fresh, cfg)
    epoch, _ = load_checkpoint(fresh, path, optimizer=fresh_opt)
    assert epoch == 2
    resumed, resumed_net, _ = run_training(
        cfg, tr, va, network=fresh, optimizer=fresh_opt, start_epoch=epoch,
        prior_val_acc=[m.val_acc for m in part_metrics],
    )
    for a, b in zip(full_metrics[2:], resumed):
        assert (a.epoch, a.train_loss, a.train_acc, a.val_loss, a.val_acc,
                a.val_acc_ma5) == (
            b.epoch, b.train_loss, b.train_acc, b.val_loss, b.val_acc, b.val_acc_ma5
        )
    for (pa, _), (pb, _) in zip(full_net.parameters(), resumed_net.parameters()):
        np.testing.assert_array_equal(pa, pb)


# ---------------------------------------------------------------------------
# filter export


def test_export_constant_slice_mid_gray(tmp_path):
    from PIL import Image

    net = build_network(
        "conv(out=1, k=3, pad=1); relu; flatten; dense(out=num_classes); softmax_ce",
        (1, 4, 4), 2, 0,
    )
    net.layers[0].kernels[...] = 0.42  # constant slice
    path = tmp_path / "filters.png"
    train.export_filters(net, path)
    arr = np.asarray(Image.open(path))
    assert (arr[1:4, 1:4] == 128).all()


def test_export_forty_slices_is_5x8_grid(tmp_path):
    net = build_network(DEFAULT_GCNN, (1, 32, 32), 4, 0)
    rows, cols = train.export_filters(net, tmp_path / "f.png")
    assert (rows, cols) == (5, 8)


def test_export_initial_filters_correlate_with_bank(tmp_path):
    net = build_network(DEFAULT_GCNN, (1, 32, 32), 4, 7)
    train.export_filters(net, tmp_path / "f.png")
    layer = net.layers[0]
    kernels = layer.materialize_kernels()
    bank = gabor.build_filter_bank()
    for o in range(40):
        expected = gabor.make_kernel(layer.param_set.slice_params(o, 0), 11)
        a = kernels[o, 0].ravel()
        b = expected.ravel()
        corr = np.dot(a - a.mean(), b - b.mean()) / (
            np.linalg.norm(a - a.mean()) * np.linalg.norm(b - b.mean())
        )
        assert corr > 0.999
        omega, theta = bank[o]
        assert layer.param_set.omega[o, 0] == omega
        assert layer.param_set.theta[o, 0] == theta


# ---------------------------------------------------------------------------
# config parsing


def test_parse_config_defaults_and_round_trip():
    cfg = parse_config_text("config_version = 1\nseed = 9\n")
    assert cfg.seed == 9
    assert cfg.batch_size == 64
    assert cfg.lr == 0.001
    assert (cfg.beta1, cfg.beta2) == (0.9, 0.999)
    reparsed = parse_config_text(train.resolved_config_text(cfg))
    assert reparsed == cfg


def test_parse_config_rejects_unknown_key():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("config_version = 1\nbogus_key = 3\n")
    assert "bogus_key" in str(exc.value)


def test_parse_config_requires_version():
    with pytest.raises(ConfigError):
        parse_config_text("seed = 1\n")
    with pytest.raises(ConfigError):
        parse_config_text("config_version = 99\n")


def test_parse_config_lr_decay_and_comments():
    cfg = parse_config_text(
        "config_version = 1  # version\n# full comment\nlr_decay = 30:10,50:10\n"
    )
    assert cfg.lr_decay == [(30, 10.0), (50, 10.0)]


# ---------------------------------------------------------------------------
# paired experiment plumbing (desk-scale convergence lives in acceptance)


def test_paired_experiment_outputs(tmp_path):
    tr, va = _small_data(n=64)
    cfg = _small_config(tmp_path, epochs=2)
    summary = run_paired_experiment(cfg, tr, va)
    out = tmp_path / "run"
    assert (out / "gcnn_metrics.csv").exists()
    assert (out / "cnn_metrics.csv").exists()
    assert (out / "summary.txt").exists()
    header = (out / "gcnn_metrics.csv").read_text().splitlines()[0]
    assert header == train.CSV_HEADER
    rows = (out / "gcnn_metrics.csv").read_text().splitlines()[1:]
    assert len(rows) == 2
    # first-layer parameter counts per the two formulas (k=5, c_in=1, c_out=8)
    assert summary["gcnn_first_layer_params"] == 4 * 8 * 1 + 8
    assert summary["cnn_first_layer_params"] == 25 * 8 * 1 + 8
    assert summary["gcnn_first_layer_params"] == 40
    assert summary["cnn_first_layer_params"] == 208


def test_paired_requires_gabor_layer(tmp_path):
    tr, va = _small_data()
    cfg = _small_config(
        tmp_path, network="conv(out=2, k=3, pad=1); relu; flatten; "
        "dense(out=num_classes); softmax_ce"
    )
    with pytest.raises(ConfigError):
        run_paired_experiment(cfg, tr, va)
