import re

import pytest

from protoformer.cli import main
from protoformer.config import Config, parse_config
from protoformer.cost import SCHEMES, attention_cost, cost_model, count_params
from protoformer.exceptions import ConfigError
from protoformer.model import build_model


def closed_form_params(c, layers=1, c3=64, c4=128, d_ff=None):
    """Learnable scalars after the feature extractor, summed by hand."""
    d_ff = d_ff or 4 * c
    merge = (c3 + c4) * c + c
    fusion = (2 * c + 1) * c + c
    branch = (c * c + c) + (9 * c * c + c)
    pixel = 3 * branch + (c * c + c)
    attention = 4 * (c * c + c)
    layer = 2 * attention + 3 * (2 * c) + (c * d_ff + d_ff) + (d_ff * c + c)
    return merge + fusion + pixel + c + layers * layer


class TestConfig:
    def test_empty_file_defaults(self, tmp_path):
        (tmp_path / "c.txt").write_text("")
        assert parse_config(tmp_path / "c.txt") == Config()

    def test_dim(self):
        assert parse_config(text="dim = 64\n").dim == 64

    def test_aliases_and_comments(self):
        cfg = parse_config(text="# width\nC = 32   # channels\nlayers = 2\nk = 5\n")
        assert (cfg.dim, cfg.decoder_layers, cfg.shots) == (32, 2, 5)

    def test_heads_divisibility(self):
        with pytest.raises(ConfigError, match="divisible"):
            parse_config(text="dim = 63\nn_heads = 4\n")

    @pytest.mark.parametrize(
        "text",
        ["colour = blue\n", "dim = sixty\n", "image_size = 60\n", "shots = 0\n", "decoder_layers = 0\n", "dim 64\n", "fold = 4\n"],
    )
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text=text)

    def test_overrides_win(self, tmp_path):
        (tmp_path / "c.txt").write_text("seed = 3\nsteps = 10\n")
        cfg = parse_config(tmp_path / "c.txt", {"seed": 9, "steps": "20"})
        assert cfg.seed == 9 and cfg.steps == 20

    def test_round_trip(self):
        cfg = Config(dim=32, lr=3e-4, use_prior=False, backbone_widths=(8, 16, 32), manifest="data/m.txt")
        assert parse_config(text=cfg.to_text()) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="nope"):
            parse_config(tmp_path / "nope.txt")


class TestCountParams:
    def test_closed_form_c16(self):
        assert count_params(Config(dim=16)) == closed_form_params(16) == 16096

    @pytest.mark.parametrize("dim, layers", [(8, 1), (32, 2), (64, 1), (64, 3)])
    def test_closed_form_general(self, dim, layers):
        assert count_params(Config(dim=dim, decoder_layers=layers)) == closed_form_params(dim, layers)

    def test_attention_projections_quadruple(self):
        def projections(dim):
            net = build_model(Config(dim=dim))
            return sum(p.size for n, p in net.named_parameters() if re.search(r"attn\.w[qkvo]\.weight$", n))

        assert projections(128) == 4 * projections(64)

    def test_ratio_regime(self):
        ratio = count_params(Config(dim=128)) / count_params(Config(dim=64))
        assert 3.0 <= ratio <= 4.2

    def test_monotone(self):
        dims = [count_params(Config(dim=d)) for d in (8, 16, 32, 64)]
        layers = [count_params(Config(dim=16, decoder_layers=n)) for n in (1, 2, 3)]
        assert dims == sorted(set(dims)) and layers == sorted(set(layers))

    def test_include_backbone(self):
        cfg = Config(dim=16)
        net = build_model(cfg)
        trainable_backbone = sum(p.size for p in net.backbone.parameters(trainable_only=True))
        assert count_params(cfg, include_backbone=True) == count_params(cfg) + trainable_backbone

    def test_frozen_backbone_same_count(self):
        assert count_params(Config(dim=16, freeze_backbone=True)) == count_params(Config(dim=16))


class TestAttentionCost:
    def test_derived_numbers(self):
        m = cost_model(64, 3600, 3600)
        assert m["proto_query"].score_aggregate_macs == 460_800
        assert m["pixel_wise"].score_aggregate_macs == 1_658_880_000

    @pytest.mark.parametrize("c, nq, ns, heads", [(64, 3600, 3600, 1), (16, 7, 13, 4), (3, 1, 99, 1)])
    def test_ratio_is_ns(self, c, nq, ns, heads):
        m = cost_model(c, nq, ns, heads)
        assert m["pixel_wise"].score_aggregate_macs == ns * m["proto_query"].score_aggregate_macs
        assert m["proto_query"].score_aggregate_macs == 2 * nq * c
        assert m["pixel_wise"].score_aggregate_macs == 2 * nq * ns * c

    def test_degenerate_support(self):
        m = cost_model(32, 50, 1)
        assert m["pixel_wise"].score_aggregate_macs == m["proto_query"].score_aggregate_macs

    def test_projection_accounting(self):
        c, nq, ns = 8, 10, 6
        proto = attention_cost("proto_query", c, nq, ns)
        pixel = attention_cost("pixel_wise", c, nq, ns)
        assert proto.projection_macs == {"q": c * c, "k": c * c * nq, "v": c * c * nq, "o": c * c}
        assert sum(pixel.projection_macs.values()) == 2 * c * c * (nq + ns)
        assert all(isinstance(v, int) for v in proto.projection_macs.values())

    def test_invalid(self):
        with pytest.raises(ValueError):
            attention_cost("dense", 4, 4, 4)
        with pytest.raises(ValueError):
            attention_cost("proto_query", 0, 4, 4)
        assert SCHEMES == ("proto_query", "pixel_wise")


class TestCli:
    def test_bench_attn(self, capsys):
        assert main(["bench-attn", "--dim", "64", "--nq", "3600", "--ns", "3600"]) == 0
        out = capsys.readouterr().out
        assert "460,800" in out and "1,658,880,000" in out and "= 3,600 (= N_s)" in out
        assert "N_q*N_s*C" in out

    def test_bench_attn_measure(self, capsys):
        assert main(["bench-attn", "--dim", "8", "--nq", "16", "--ns", "16", "--measure"]) == 0
        assert "measured pixel_wise" in capsys.readouterr().out

    def test_count_params(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("dim = 16\n")
        assert main(["count-params", "--config", str(tmp_path / "c.txt")]) == 0
        assert capsys.readouterr().out.strip() == "16096"

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["count-params", "--bogus"])
        assert exc.value.code == 2

    def test_runtime_failure_one_line(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("dim = 63\nn_heads = 4\n")
        assert main(["count-params", "--config", str(tmp_path / "c.txt")]) == 1
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1 and "divisible" in err

    def test_gen_train_eval(self, tmp_path, capsys):
        spec = tmp_path / "spec.txt"
        spec.write_text("images_per_class = 6\nimage_size = 32\n")
        assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 0
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(f"manifest = {tmp_path / 'data/manifest.txt'}\nimage_size = 32\ndim = 8\nbatch = 1\nlog_every = 0\n")
        for run in ("r1", "r2"):
            assert main(["train", "--config", str(cfg), "--seed", "7", "--steps", "3", "--out", str(tmp_path / run)]) == 0
        assert (tmp_path / "r1/loss.csv").read_bytes() == (tmp_path / "r2/loss.csv").read_bytes()
        args = ["eval", "--checkpoint", str(tmp_path / "r1/checkpoint"), "--episodes", "5", "--out", str(tmp_path / "rep")]
        assert main(args + ["--dump-masks", str(tmp_path / "masks")]) == 0
        assert "episodes 5" in capsys.readouterr().out
        assert (tmp_path / "rep.csv").exists() and (tmp_path / "rep.txt").exists()
        assert len(list((tmp_path / "masks/fold0").iterdir())) == 5

    def test_train_without_dataset(self, capsys):
        assert main(["train", "--steps", "1"]) == 1
        assert "manifest" in capsys.readouterr().err
