"""Runner integration tests: determinism, flags, configs, transports."""

import json
import os

import numpy as np
import pytest

from difftwin.configs import build_node, demo_configs
from difftwin.facility import ScenarioSpec
from difftwin.models.io import mlp_from_dict, siever_fit_from_dict
from difftwin.runner import RunConfig, run


def short_config(prepared_models, out_dir, **kw):
    mlp_doc, fit_doc = prepared_models
    defaults = dict(
        scenario=ScenarioSpec("static", duration_s=150.0, seed=11),
        out_dir=str(out_dir),
        optimize=True,
        activation_delay=60.0,
        mlp_doc=mlp_doc,
        siever_fit_doc=fit_doc,
    )
    defaults.update(kw)
    return RunConfig(**defaults)


class TestDeterminism:
    def test_identical_runs_bitwise_identical(self, prepared_models, tmp_path):
        paths = []
        for sub in ("a", "b"):
            cfg = short_config(prepared_models, tmp_path / sub)
            run(cfg)
            paths.append(tmp_path / sub)
        for name in ("run.csv", "states.csv"):
            a = (paths[0] / name).read_bytes()
            b = (paths[1] / name).read_bytes()
            assert a == b, name


class TestFlags:
    def test_no_optimize_keeps_setpoints_constant(self, prepared_models, tmp_path):
        cfg = short_config(prepared_models, tmp_path, optimize=False)
        res = run(cfg)
        speeds = {r.speed for r in res.rows}
        heights = {r.height for r in res.rows}
        assert speeds == {cfg.initial_speed}
        assert heights == {cfg.initial_height}
        assert all(r.grad_msgs == 0 for r in res.rows)

    def test_optimized_run_moves_setpoints(self, prepared_models, tmp_path):
        cfg = short_config(prepared_models, tmp_path)
        res = run(cfg)
        assert res.final_setpoints["height"] != cfg.initial_height


class TestCsvSchema:
    def test_golden_headers(self, prepared_models, tmp_path):
        cfg = short_config(prepared_models, tmp_path, optimize=False)
        res = run(cfg)
        with open(res.run_path) as fh:
            assert fh.readline().strip() == (
                "window,time_s,phase,speed,height,loss,info_msgs,info_rounds,"
                "grad_msgs,grad_rounds,max_info_per_pair_step,max_info_per_step,siever_grad"
            )
        with open(res.states_path) as fh:
            assert fh.readline().strip() == "window,time_s,node,coord,mean,std,truth"


class TestConfigs:
    def test_node_config_json_round_trip(self, prepared_models):
        mlp_doc, fit_doc = prepared_models
        cfgs = demo_configs(mlp_doc, fit_doc)
        for name, cfg in cfgs.items():
            doc = json.loads(json.dumps(cfg))
            node = build_node(doc)
            assert node.name == name
            assert node.layout.dim == node.initial_prior.dim * 2

    def test_model_docs_round_trip(self, prepared_models):
        mlp_doc, fit_doc = prepared_models
        mlp = mlp_from_dict(json.loads(json.dumps(mlp_doc)))
        assert mlp.residual_cov.shape == (4, 4)
        kernels, splits = siever_fit_from_dict(json.loads(json.dumps(fit_doc)))
        assert set(kernels) == {"S", "M", "L"}
        assert len(splits) == 9


class TestTcpTransport:
    def test_tiny_tcp_run_matches_memory(self, prepared_models, tmp_path):
        cfg_mem = short_config(
            prepared_models, tmp_path / "mem", optimize=False,
            scenario=ScenarioSpec("static", duration_s=90.0, seed=5),
            write_states=False,
        )
        res_mem = run(cfg_mem)
        cfg_tcp = short_config(
            prepared_models, tmp_path / "tcp", optimize=False, transport="tcp",
            scenario=ScenarioSpec("static", duration_s=90.0, seed=5),
            write_states=False,
        )
        res_tcp = run(cfg_tcp)
        for key in res_mem.final_setpoints:
            assert res_tcp.final_setpoints[key] == pytest.approx(
                res_mem.final_setpoints[key], abs=1e-9
            )
