import math
from dataclasses import replace

import numpy as np
import pytest

from twafl.aggregation import ClientUploadView
from twafl.params import LayeredParams, StructureError, partition_sizes
from twafl.protocol import (
    ConfigError, ModelTransfer, ProtocolConfig, ServerState, client_update, dump_config,
    es_rounds_for_freq, flag_for_round, load_config, make_config, participants_per_round,
    run_experiment, run_round, select_clients, setup, simulate,
)


def standard_loop(**kw):
    return ProtocolConfig(rounds_in_loop=15, es_rounds={11, 12, 13, 14, 0}, **kw)


@pytest.mark.parametrize("t,flag", [(11, True), (15, True), (3, False), (30, True), (16, False), (14, True)])
def test_flag_for_round(t, flag):
    assert flag_for_round(t, standard_loop()) is flag


def test_flag_rounds_start_at_one():
    with pytest.raises(ValueError):
        flag_for_round(0, standard_loop())


def test_es_rounds_for_freq():
    assert es_rounds_for_freq(5, 15) == {11, 12, 13, 14, 0}
    assert es_rounds_for_freq(15, 15) == set(range(15))
    assert es_rounds_for_freq(3, 15) == {13, 14, 0}
    assert es_rounds_for_freq(1, 1) == {0}
    with pytest.raises(ValueError):
        es_rounds_for_freq(16, 15)
    with pytest.raises(ValueError):
        es_rounds_for_freq(0, 15)


@pytest.mark.parametrize("fe", [1, 3, 5, 7, 15])
def test_flag_count_per_loop(fe):
    cfg = ProtocolConfig(rounds_in_loop=15, es_rounds=es_rounds_for_freq(fe, 15))
    for loop in range(4):
        assert sum(flag_for_round(t, cfg) for t in range(15 * loop + 1, 15 * loop + 16)) == fe


def test_participants_per_round():
    assert participants_per_round(20, 0.1) == 2
    assert participants_per_round(10, 0.05) == 1
    assert participants_per_round(10, 0.01) == 1
    assert participants_per_round(10, 1.0) == 10


def test_select_clients(rng):
    for _ in range(50):
        s = select_clients(20, 0.1, rng)
        assert len(s) == 2 == len(set(s)) and all(0 <= k < 20 for k in s)
    assert len(select_clients(10, 0.05, rng)) == 1
    with pytest.raises(ValueError):
        select_clients(10, 0.0, rng)


def _one_client(small_pool, small_config, **kw):
    cfg = replace(small_config, **kw)
    server, clients, env, _ = setup(cfg, small_pool)
    return cfg, server, clients, env


def test_client_update_zero_step_shallow(small_pool, small_config):
    cfg, server, clients, env = _one_client(small_pool, small_config, eta=0.0)
    state = clients[0]
    # give the client a distinct deep partition so the download is visible
    local = state.retained.replace("deep", LayeredParams.from_arrays(
        [b.array() + 1.0 for b in state.retained.blocks], state.retained.split_index,
        [b.layer_id for b in state.retained.blocks]))
    state = replace(state, retained=local)
    down = ModelTransfer.of(server.central, full=False)
    new, up = client_update(state, down, False, cfg, env.spec, np.random.default_rng(0))
    assert up.selector == "shallow"
    assert all(np.array_equal(a.values, b.values) for a, b in zip(up.blocks, server.central.shallow))
    assert new.retained.equals(local, "deep")


def test_client_update_zero_step_full(small_pool, small_config):
    cfg, server, clients, env = _one_client(small_pool, small_config, eta=0.0)
    down = ModelTransfer.of(server.central, full=True)
    _, up = client_update(clients[1], down, True, cfg, env.spec, np.random.default_rng(0))
    assert up.selector == "all"
    assert up.apply_to(server.central).equals(server.central)


def test_client_update_partition_mismatch(small_pool, small_config):
    cfg, server, clients, env = _one_client(small_pool, small_config)
    with pytest.raises(StructureError):
        client_update(clients[0], ModelTransfer.of(server.central, True), False, cfg, env.spec,
                      np.random.default_rng(0))
    with pytest.raises(StructureError):
        client_update(clients[0], ModelTransfer.of(server.central, False), True, cfg, env.spec,
                      np.random.default_rng(0))


def test_shallow_round_trains_deep_locally_but_keeps_it(small_pool, small_config):
    cfg, server, clients, env = _one_client(small_pool, small_config)
    # round 1 of a 3-round loop with es={0} is a shallow-only round
    new_server, new_clients, rec = run_round(server, clients, cfg, np.random.default_rng(0), env)
    assert not rec.flag
    for k in rec.participants:
        assert not new_clients[k].retained.equals(clients[k].retained, "deep")
        assert new_server.client_views[k].params.equals(server.client_views[k].params, "deep")
        assert not new_server.client_views[k].params.equals(server.client_views[k].params, "shallow")
        assert new_server.client_views[k].timestamp_g == 1
        assert new_server.client_views[k].timestamp_s == 0
    assert new_server.central.equals(server.central, "deep")


def test_fedavg_single_client_central_is_upload(small_pool, small_config):
    cfg = replace(small_config, K=1, C=1.0).with_variant("FedAVG")
    server, clients, env, rng = setup(cfg, small_pool)
    new_server, new_clients, rec = run_round(server, clients, cfg, rng, env)
    assert rec.participants == (0,) and rec.flag
    assert new_server.central.equals(new_clients[0].retained)


def test_scripted_two_round_replay(small_pool, small_config):
    cfg = replace(small_config, eta=0.0, a=math.e, K=4, C=0.5, rounds_in_loop=1, es_rounds={0})
    server, clients, env, _ = setup(cfg, small_pool)
    base = server.central

    def const(v):
        return LayeredParams.from_arrays([np.full(b.shape, v) for b in base.blocks], base.split_index,
                                         [b.layer_id for b in base.blocks])

    n_k = {k: v.n_k for k, v in server.client_views.items()}
    values = {0: 1.0, 1: -2.0, 2: 3.0, 3: 0.5}
    stamps = {0: 0, 1: 1, 2: 2, 3: 0}
    views = {k: ClientUploadView(k, const(values[k]), stamps[k], stamps[k], n_k[k]) for k in range(4)}
    server = ServerState(2, const(0.25), views)
    central_val = 0.25
    rng = np.random.default_rng(11)
    for t in (3, 4):
        server, clients, rec = run_round(server, clients, cfg, rng, env)
        assert rec.round == t
        for k in rec.participants:
            values[k], stamps[k] = central_val, t
        n = sum(n_k.values())
        w = {k: n_k[k] / n * math.e ** -(t - stamps[k]) for k in range(4)}
        central_val = sum(w[k] * values[k] for k in range(4)) / sum(w.values())
        assert np.allclose(server.central.vector(), central_val, rtol=0, atol=1e-12)


def test_zero_rounds(small_pool, small_config):
    cfg = replace(small_config, total_rounds=0)
    res = simulate(cfg, small_pool)
    assert res.records == []
    assert res.server.central.equals(res.initial)


def test_experiment_is_deterministic(small_pool, small_config):
    a = run_experiment(small_config, small_pool)
    b = run_experiment(small_config, small_pool)
    assert a == b
    c = run_experiment(replace(small_config, seed=4), small_pool)
    assert a != c


def test_protocol_invariants(small_pool, small_config):
    cfg = replace(small_config, total_rounds=0)
    server, clients, env, rng = setup(cfg, small_pool)
    s_g, s_s = partition_sizes(server.central)
    for _ in range(9):
        prev_server, prev_clients = server, clients
        server, clients, rec = run_round(server, clients, cfg, rng, env)
        t = rec.round
        for k, v in server.client_views.items():
            assert v.timestamp_s <= v.timestamp_g <= t
            if k not in rec.participants:
                assert v is prev_server.client_views[k]
                assert clients[k] is prev_clients[k]
        if not rec.flag:
            assert server.central.equals(prev_server.central, "deep")
            assert rec.params_up == rec.params_down == cfg.m * s_g
        else:
            assert rec.params_up == rec.params_down == cfg.m * (s_g + s_s)
        assert rec.cumulative_params == prev_server.cumulative_params + rec.params_up + rec.params_down


def test_afl_matches_fedavg_weighting_on_identical_schedule(small_pool, small_config):
    """With a = 1 the temporal path is inert: FedAVG and AFL on a full schedule coincide."""
    full = dict(rounds_in_loop=1, es_rounds={0}, total_rounds=5)
    fed = simulate(replace(small_config, **full).with_variant("FedAVG"), small_pool)
    afl = simulate(replace(small_config, **full).with_variant("AFL"), small_pool)
    assert fed.server.central.max_abs_diff(afl.server.central) <= 1e-12


def test_config_rules():
    with pytest.raises(ConfigError, match="es_rounds"):
        ProtocolConfig(variant="TEFL")
    with pytest.raises(ConfigError, match="a"):
        ProtocolConfig(variant="AFL", a=math.e)
    with pytest.raises(ConfigError, match="es_rounds"):
        ProtocolConfig(rounds_in_loop=15, es_rounds={15})
    with pytest.raises(ConfigError, match="C"):
        ProtocolConfig(C=0)
    cfg = ProtocolConfig()
    assert cfg.with_variant("TEFL").es_rounds == set(range(15))
    assert cfg.with_variant("AFL").a == 1 and cfg.with_variant("AFL").es_rounds == cfg.es_rounds
    assert cfg.with_variant("FedAVG").fe == 15


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("# loop defaults\nvariant = TWAFL\nK = 10\nC = 0.2\na = e\n"
                    "freq = 7/15\nhidden = 8, 16\nnormalize_weights = false\n")
    cfg = load_config(path)
    assert (cfg.K, cfg.C, cfg.a, cfg.fe, cfg.hidden, cfg.normalize_weights) == \
        (10, 0.2, math.e, 7, (8, 16), False)
    assert cfg.es_rounds == {9, 10, 11, 12, 13, 14, 0}
    (tmp_path / "dump.cfg").write_text(dump_config(cfg))
    assert load_config(tmp_path / "dump.cfg") == cfg


def test_make_config_variant_defaults():
    assert make_config({"variant": "TEFL"}).fe == 15
    assert make_config({"variant": "AFL"}).a == 1
    assert make_config({"a": "e/2"}).a == math.e / 2
    with pytest.raises(ConfigError) as err:
        make_config({"variant": "AFL", "a": "e"})
    assert err.value.field == "a"
    with pytest.raises(ConfigError) as err:
        make_config({"bogus": "1"})
    assert err.value.field == "bogus"
    with pytest.raises(ConfigError) as err:
        make_config({"K": "many"})
    assert err.value.field == "K"
