import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from korisk import cli, harness
from korisk.calibrate import CalibrationFit, SweepRecord, calibrated_bound
from korisk.errors import InfeasibleTargetError, InputError, ParseError
from korisk.harness import (
    SweepConfig,
    load_network_spec,
    load_scales,
    load_sweep_config,
    read_calibration_csv,
    read_sweep_csv,
    run_calibrate,
    run_predict,
    run_scale_table,
    run_sweep,
    run_verify,
    sweep_csv_text,
    write_calibration_csv,
    write_sweep_csv,
)
from korisk.models import Dataset, dataset_error, select_lambda
from korisk.phantom import generate_pool
from korisk.plot import emit_plot, render_svg
from korisk.rng import derive_seed
from korisk.tomo import ForwardModel, Geometry

SVG = "{http://www.w3.org/2000/svg}"


@pytest.fixture(scope="module")
def sweep8():
    return run_sweep(SweepConfig(h=8))


@pytest.fixture
def sweep8_csv(tmp_path, sweep8):
    path = tmp_path / "sweep.csv"
    write_sweep_csv(sweep8.records, path)
    return path


@pytest.fixture
def reference_calib_csv(tmp_path):
    path = tmp_path / "calib.csv"
    write_calibration_csv([CalibrationFit("ko", 8, 2.48e-3, 8.51e-3, 5), CalibrationFit("fc", 8, 5.81e-3, 6.86e-2, 5)], path)
    return path


def strip_wall_time(text):
    return "\n".join(line.rsplit(",", 2)[0] for line in text.splitlines())


class TestSweepConfig:
    def test_defaults(self):
        c = SweepConfig()
        assert c.n_grid == (4, 8, 16, 32, 64) and c.seeds == 5
        assert (c.val_size, c.test_size, c.tikhonov_alpha, c.metric) == (32, 128, 0.1, "mse")
        assert c.pool_size == 64 + 32 + 128

    @pytest.mark.parametrize(
        "kwargs", [dict(n_grid=(8, 4)), dict(n_grid=(1, 4)), dict(seeds=0), dict(metric="mae"), dict(archs="cnn")]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(InputError):
            SweepConfig(**kwargs)

    def test_workers_from_environment(self, monkeypatch):
        monkeypatch.setenv(harness.WORKERS_ENV, "3")
        assert SweepConfig().parallelism == 3

    def test_load(self, tmp_path):
        path = tmp_path / "s.ini"
        path.write_text("# comment\n[sweep]\nh = 8, 16  # two scales\nseeds = 2\nrelu_at_eval = yes\nbase_seed = 0x10\n")
        c = load_sweep_config(path)
        assert c.h == (8, 16) and c.seeds == 2 and c.relu_at_eval and c.base_seed == 16

    def test_load_unknown_key(self, tmp_path):
        path = tmp_path / "s.ini"
        path.write_text("[sweep]\nsedes = 2\n")
        with pytest.raises(ParseError):
            load_sweep_config(path)

    def test_load_scales_and_layers(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text(
            "[scale.a]\nh = 8\n[scale.b]\nh = 256\nv = 90\nb = 256\n"
            "[layer.2]\nlipschitz = 2\nknown = true\n[layer.1]\nlipschitz = 1\np = 80\n"
        )
        assert load_scales(path) == [(8, 10, 8), (256, 90, 256)]
        net = load_network_spec(path)
        assert net.lipschitz == [1.0, 2.0] and net.layers[1].known and net.layers[0].params_p == 80


class TestRunSweep:
    def test_row_count(self, sweep8):
        assert len(sweep8.records) == 2 * 5 * 5
        assert all(r.ok for r in sweep8.records)

    def test_deterministic(self, sweep8):
        again = run_sweep(SweepConfig(h=8, parallelism=3))
        assert strip_wall_time(sweep_csv_text(again.records)) == strip_wall_time(sweep_csv_text(sweep8.records))

    def test_cell_matches_independent_recomputation(self, sweep8):
        # Pool layout: train prefix, then validation, then test, from one seeded stream.
        model = ForwardModel.build(Geometry.surrogate(8))
        seed, n = 3, 16
        pool = Dataset.from_images(generate_pool(derive_seed(0, seed), 224, 8), model)
        train, val, test = pool[:n], pool[64:96], pool[96:]
        lam, fitted, val_err = select_lambda(train, val, (1e-6, 1e-4, 1e-2, 1.0, 1e2), "fc", model)
        rec = next(r for r in sweep8.records if (r.arch, r.n, r.seed) == ("fc", n, seed))
        assert rec.lam == lam and rec.val_err == val_err
        assert rec.test_err == dataset_error(fitted, test)

    def test_training_sets_nested(self, sweep8):
        model = ForwardModel.build(Geometry.surrogate(8))
        pool = Dataset.from_images(generate_pool(derive_seed(0, 0), 224, 8), model)
        sets = [pool[:n].ys for n in (4, 8, 16, 32, 64)]
        for small, big in zip(sets, sets[1:]):
            np.testing.assert_array_equal(big[: len(small)], small)

    def test_fit_failures_recorded(self):
        res = run_sweep(SweepConfig(h=8, n_grid=(4, 8), seeds=1, lambda_grid=(0.0,), archs=("fc",)))
        assert len(res.records) == 2
        assert all(not r.ok and "lambda" in r.error_flag for r in res.records)

    def test_ko_below_fc_at_h8(self, sweep8):
        means = {}
        for r in sweep8.records:
            means.setdefault((r.arch, r.n), []).append(r.test_err)
        for n in (4, 8, 16, 32, 64):
            assert np.mean(means[("ko", n)]) < np.mean(means[("fc", n)])


class TestCsv:
    def test_round_trip_byte_identical(self, sweep8_csv, tmp_path):
        again = tmp_path / "again.csv"
        write_sweep_csv(read_sweep_csv(sweep8_csv), again)
        assert again.read_bytes() == sweep8_csv.read_bytes()

    def test_header(self, sweep8_csv):
        header = sweep8_csv.read_text().splitlines()[0]
        assert header == "arch,h,v,b,n,seed,lambda,train_err,val_err,test_err,metric,fit_wall_ms,error_flag"

    def test_special_values_round_trip(self, tmp_path):
        rec = SweepRecord("fc", 8, 10, 8, 4, 0, float("nan"), 0.1, 0.2, float("nan"), error_flag='bad, "quoted"')
        path = tmp_path / "x.csv"
        write_sweep_csv([rec], path)
        back = read_sweep_csv(path)[0]
        assert back.error_flag == rec.error_flag and math.isnan(back.test_err)

    def test_parse_error_line(self, sweep8_csv):
        lines = sweep8_csv.read_text().splitlines()
        lines[5] = lines[5].replace(",8,", ",eight,", 1)
        sweep8_csv.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match="line 6") as exc:
            read_sweep_csv(sweep8_csv)
        assert exc.value.line == 6

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.csv").write_text("")
        with pytest.raises(ParseError):
            read_sweep_csv(tmp_path / "e.csv")

    def test_wrong_field_count(self, sweep8_csv):
        sweep8_csv.write_text(sweep8_csv.read_text() + "ko,8\n")
        with pytest.raises(ParseError, match="line 52"):
            read_sweep_csv(sweep8_csv)


class TestCalibrateAndPredict:
    def test_two_rows(self, sweep8_csv, tmp_path):
        fits = run_calibrate(sweep8_csv, tmp_path / "c.csv")
        assert [(f.arch, f.h) for f in fits] == [("ko", 8), ("fc", 8)]
        assert read_calibration_csv(tmp_path / "c.csv") == fits

    def test_planted_csv(self, tmp_path):
        ns = [4, 16, 64]
        recs = [SweepRecord("ko", 8, 10, 8, n, s, 1.0, 0, 0, 2e-3 + 0.05 * math.log(n) / n) for n in ns for s in range(2)]
        write_sweep_csv(recs, tmp_path / "p.csv")
        (fit,) = run_calibrate(tmp_path / "p.csv")
        assert fit.floor == pytest.approx(2e-3 + 0.05 * math.log(64) / 64, rel=1e-15)

    def test_reference_example(self, reference_calib_csv):
        pred = run_predict(reference_calib_csv, "ko", 8, 5e-3)
        assert pred.n == 7 and pred.bound == calibrated_bound(pred.fit, 7)
        assert "N = 7" in pred.report()

    def test_at_floor(self, reference_calib_csv):
        with pytest.raises(InfeasibleTargetError):
            run_predict(reference_calib_csv, "ko", 8, 2.48e-3)

    def test_huge_target(self, reference_calib_csv):
        assert run_predict(reference_calib_csv, "fc", 8, 1e3).n == 2

    def test_missing_row(self, reference_calib_csv):
        with pytest.raises(LookupError):
            run_predict(reference_calib_csv, "ko", 16, 1e-2)


class TestScaleTable:
    def test_defaults(self):
        text, csv_text = run_scale_table()
        assert len(csv_text.splitlines()) == 7
        for cell in ("1.51e9", "5.62 GiB", "360 GiB", "0.31 KiB"):
            assert cell in text

    def test_single(self):
        _, csv_text = run_scale_table([(8, 10, 8)])
        row = dict(zip(*[line.split(",") for line in csv_text.splitlines()]))
        assert row["ratio"] == "64" and row["p_fc"] == "5120"

    def test_empty(self):
        text, csv_text = run_scale_table([])
        assert len(text.splitlines()) == 1 and len(csv_text.splitlines()) == 1


class TestVerify:
    def test_default(self):
        rep = run_verify()
        assert rep.passed and rep.n_violating == 0 and rep.max_violation <= 1e-9
        assert rep.single_layer_max_gap == 0.0

    def test_no_perturbation(self):
        rep = run_verify(seed=4, n_networks=20, n_inputs=10, perturbation=0.0)
        assert rep.passed and rep.max_violation == 0.0


class TestPlot:
    def test_structure_and_values(self, sweep8_csv, tmp_path):
        calib = tmp_path / "c.csv"
        fits = run_calibrate(sweep8_csv, calib)
        out = tmp_path / "f.svg"
        emit_plot(sweep8_csv, calib, out)
        root = ET.parse(out).getroot()
        lines = root.findall(f".//{SVG}polyline")
        dashed = [p for p in lines if p.get("stroke-dasharray")]
        assert len(lines) - len(dashed) == 2 and len(dashed) == 2
        assert len(root.findall(f".//{SVG}polygon")) == 2
        by_arch = {f.arch: f for f in fits}
        for p in dashed:
            ns = [int(v) for v in p.get("data-n").split()]
            ys = [float(v) for v in p.get("data-y").split()]
            assert ns == [4, 8, 16, 32, 64]
            for n, y in zip(ns, ys):
                assert abs(y - calibrated_bound(by_arch[p.get("data-arch")], n)) <= 1e-9
        text = out.read_text()
        assert "training samples N" in text and "calibrated bound" in text

    def test_empty_sweep_writes_nothing(self, tmp_path, reference_calib_csv):
        empty = tmp_path / "empty.csv"
        write_sweep_csv([], empty)
        out = tmp_path / "none.svg"
        with pytest.raises(ParseError):
            emit_plot(empty, reference_calib_csv, out)
        assert not out.exists()

    def test_mismatch(self, sweep8):
        with pytest.raises(InputError):
            render_svg(sweep8.records, [CalibrationFit("ko", 16, 1e-3, 1e-2, 5)])
        with pytest.raises(InputError):
            render_svg([], [])


class TestCli:
    def test_full_pipeline(self, tmp_path, capsys):
        cfg = tmp_path / "s.ini"
        cfg.write_text("[sweep]\nh = 8\nn_grid = 4, 8, 16\nseeds = 2\n")
        sweep, calib, svg = tmp_path / "s.csv", tmp_path / "c.csv", tmp_path / "p.svg"
        assert cli.main(["sweep", "--config", str(cfg), "--out", str(sweep)]) == 0
        assert cli.main(["calibrate", "--in", str(sweep), "--out", str(calib)]) == 0
        assert cli.main(["plot", "--sweep", str(sweep), "--calib", str(calib), "--out", str(svg)]) == 0
        assert svg.exists() and len(read_sweep_csv(sweep)) == 12

    def test_predict_exit_codes(self, reference_calib_csv, capsys):
        base = ["predict-n", "--calib", str(reference_calib_csv), "--arch", "ko", "--h", "8", "--eps"]
        assert cli.main(base + ["5e-3"]) == 0
        assert "N = 7" in capsys.readouterr().out
        assert cli.main(base + ["1e-3"]) == 2
        assert cli.main(base[:-3] + ["--h", "64", "--eps", "1"]) == 1

    def test_usage(self, capsys):
        assert cli.main([]) == 1
        assert cli.main(["predict-n", "--arch", "cnn"]) == 1
        assert cli.main(["sweep", "--config", "/nonexistent.ini", "--out", "x.csv"]) == 1

    def test_scale_table(self, capsys):
        assert cli.main(["scale-table"]) == 0
        assert "22.5 GiB" in capsys.readouterr().out

    def test_verify_failure_exit(self, monkeypatch, capsys):
        real = harness.run_verify

        def failing(*args, **kwargs):
            rep = real(seed=1, n_networks=5, n_inputs=5)
            rep.max_violation = 1.0
            return rep

        monkeypatch.setattr(harness, "run_verify", failing)
        assert cli.main(["verify-theorem"]) == 3
        assert "FAIL" in capsys.readouterr().out

    def test_verify_success(self, capsys):
        assert cli.main(["verify-theorem", "--seed", "7", "--networks", "20"]) == 0

    def test_bound(self, tmp_path, capsys):
        cfg = tmp_path / "net.ini"
        cfg.write_text(
            "[layer.1]\nlipschitz = 1\np = 80\n[layer.2]\nlipschitz = 2\nknown = true\n"
            "[layer.3]\nlipschitz = 3\nknown = true\n[layer.4]\nlipschitz = 1\nknown = true\n"
        )
        assert cli.main(["bound", "--config", str(cfg), "--n", "10", "--csv", str(tmp_path / "b.csv")]) == 0
        assert f"total = {288 * 80 * math.log(10) / 10:.6g}" in capsys.readouterr().out


class TestDefaultSweep:
    def test_more_data_helps(self, default_sweep):
        for key, group in harness.group_records(default_sweep.records).items():
            first = np.mean([r.test_err for r in group if r.n == 4])
            last = np.mean([r.test_err for r in group if r.n == 64])
            assert last <= first, key

    def test_floor_below_means(self, default_sweep):
        for group in harness.group_records(default_sweep.records).values():
            fit = harness.calibrate_records(group)[0]
            for n in {r.n for r in group}:
                assert fit.floor <= np.mean([r.test_err for r in group if r.n == n])
            assert fit.sigma >= 0
