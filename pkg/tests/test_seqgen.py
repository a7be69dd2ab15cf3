import json

import numpy as np
import pytest
import torch

from ensemble_ldm.core import ConfigError, Normalizer, RangeError, ShapeError
from ensemble_ldm.dataio import read_cgf, sha256_file, write_cgf
from ensemble_ldm.diffusion import DdmTrainConfig, SamplerConfig
from ensemble_ldm.nets import UNetConfig
from ensemble_ldm.seqgen import (
    GenRequest, ResidualSampler, ZeroResidualSampler, ar_training_pairs, generate_ensemble,
    generate_transformer, load_ddm, member_generator, rollout_autoregressive, save_ddm, train_ddm,
)
from ensemble_ldm.synthdata import SynthConfig
from ensemble_ldm.synthdata import generate_ensemble as synth_ensemble
from ensemble_ldm.vae import LatentSeq, VaeConfig, VaeModel, save_vae, train_vae

TINY_VAE = dict(widths=(4, 8, 8), disc_widths=(4, 4), norm_groups=2, epochs=1, batch=32)


def tiny_unet(mode, c=4):
    return UNetConfig(latent_channels=c, mode=mode, window=2, seq_len=12, base_width=8, width_mults=(1, 2),
                      attn_levels=(False, True), norm_groups=4)


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    torch.set_num_threads(1)
    root = tmp_path_factory.mktemp("world")
    truth = synth_ensemble(SynthConfig(n_members=4, n_years=3, n_lat=16, n_lon=32))
    norm = Normalizer.fit(truth.members)
    x = np.concatenate([norm.normalize(m.data, m.calendar_month) for m in truth.members])
    model, _, _ = train_vae(x[:96], VaeConfig(**TINY_VAE))
    vm = VaeModel(model, norm)
    save_vae(root / "vae.ckp", vm)
    lat = {m.member_id: vm.encode_seq(m) for m in truth.members}
    for mid, z in lat.items():
        write_cgf(root / f"lat_{mid}.cgf", z)
    ddms = {}
    for mode in ("ar", "transformer"):
        ddm, _ = train_ddm(lat, 0, [2, 3], tiny_unet(mode), DdmTrainConfig(epochs=1, batch=16))
        save_ddm(root / f"{mode}.ckp", ddm)
        ddms[mode] = ddm
    return dict(root=root, truth=truth, vm=vm, lat=lat, ddms=ddms)


def random_latents(n=30, shape=(2, 2, 3), seed=0):
    rng = np.random.default_rng(seed)
    return LatentSeq(rng.normal(size=(n,) + shape).astype(np.float32), 1950, 1, 7)


class CountingSampler(ZeroResidualSampler):
    """Returns a per-member constant drawn from that member's generator."""

    def sample_ar(self, window_res, zc_win, generators):
        self.invocations += 1
        v = torch.stack([torch.rand((), generator=g) for g in generators])
        return v.reshape(-1, 1, 1, 1).expand_as(zc_win[:, -1]).clone()

    def sample_seq(self, zc_seq, generators):
        self.invocations += 1
        v = torch.stack([torch.rand((), generator=g) for g in generators])
        return v.reshape(-1, 1, 1, 1, 1).expand_as(zc_seq).clone()


def test_ar_length_one_single_call():
    zc = random_latents()
    s = ZeroResidualSampler(window=3)
    out = rollout_autoregressive(s, None, zc, GenRequest(n_members=2, length=1))
    assert s.invocations == 1 and len(out) == 2 and len(out[0]) == 4


def test_zero_residual_identity_ar_and_transformer():
    zc = random_latents(48)
    ar = rollout_autoregressive(ZeroResidualSampler(window=3), None, zc, GenRequest(n_members=2))
    for m in ar:
        assert np.array_equal(m.data, zc.data) and (m.start_year, m.start_month) == (1950, 1)
    tf = generate_transformer(ZeroResidualSampler(seq_len=24), None, zc, GenRequest("transformer", n_members=2))
    assert all(np.array_equal(m.data, zc.data) for m in tf)


def test_zero_residual_decodes_to_reconstruction(world):
    zc = world["lat"][1]
    grid = world["truth"].members[1].grid
    gen = rollout_autoregressive(ZeroResidualSampler(window=2), world["vm"], zc, GenRequest(n_members=1, length=5),
                                 grid=grid)[0]
    rec = world["vm"].decode_seq(zc.slice_months(0, 7), grid)
    assert np.array_equal(gen.data, rec.data)


@pytest.mark.parametrize("length", [24, 48])
def test_transformer_output_length(length):
    zc = random_latents(60)
    s = ZeroResidualSampler(seq_len=24)
    out = generate_transformer(s, None, zc, GenRequest("transformer", n_members=1, length=length))
    assert len(out[0]) == length and s.invocations == length // 24
    with pytest.raises(ConfigError):
        generate_transformer(s, None, zc, GenRequest("transformer", n_members=1, length=30))


def test_range_errors():
    zc = random_latents(10)
    with pytest.raises(RangeError):
        rollout_autoregressive(ZeroResidualSampler(window=3), None, zc, GenRequest(length=8))
    with pytest.raises(RangeError):
        rollout_autoregressive(ZeroResidualSampler(window=3), None, zc, GenRequest(start=1))
    with pytest.raises(ShapeError):
        rollout_autoregressive(ZeroResidualSampler(window=3), None, zc, GenRequest(start=3, length=2),
                               init_window=np.zeros((2, 2, 2, 3)))
    with pytest.raises(RangeError):
        generate_transformer(ZeroResidualSampler(seq_len=12), None, zc, GenRequest("transformer", length=12))
    with pytest.raises(ConfigError):
        GenRequest(mode="gan")
    with pytest.raises(ConfigError):
        GenRequest(length=0)


def test_ar_sampler_sees_zc_over_window_and_target():
    zc = random_latents(12)
    seen = []

    class Recording(ZeroResidualSampler):
        def sample_ar(self, window_res, zc_win, generators):
            seen.append(zc_win[0].numpy().copy())
            return super().sample_ar(window_res, zc_win, generators)

    rollout_autoregressive(Recording(window=3), None, zc, GenRequest(n_members=1, start=5, length=4))
    assert len(seen) == 4
    for k, win in enumerate(seen):
        assert np.array_equal(win, zc.data[5 + k - 3:5 + k + 1])


def test_member_stream_swap_swaps_outputs():
    zc = random_latents(12)
    req = GenRequest(n_members=2, length=6)
    g = lambda seeds: [torch.Generator().manual_seed(s) for s in seeds]  # noqa: E731
    a = rollout_autoregressive(CountingSampler(window=3), None, zc, req, generators=g([5, 9]))
    b = rollout_autoregressive(CountingSampler(window=3), None, zc, req, generators=g([9, 5]))
    assert np.array_equal(a[0].data, b[1].data) and np.array_equal(a[1].data, b[0].data)
    assert not np.array_equal(a[0].data, a[1].data)


def test_member_generators_are_independent_of_count():
    a = torch.rand(3, generator=member_generator(4, 2))
    b = torch.rand(3, generator=member_generator(4, 2))
    c = torch.rand(3, generator=member_generator(4, 3))
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_ar_training_pairs_layout():
    lat = {i: random_latents(8, seed=i) for i in range(3)}
    tgt, win, cnd = ar_training_pairs(lat, 0, [1, 2], window=3)
    assert tgt.shape == (10, 2, 2, 3) and win.shape == (10, 3, 2, 2, 3) and cnd.shape == (10, 4, 2, 2, 3)
    # month t=3 of member 1 is the first row; its window is months 0..2
    res1 = lat[1].data - lat[0].data
    assert np.array_equal(tgt[0], res1[3]) and np.array_equal(win[0], res1[0:3])
    # z_c covers the window and the target month
    assert np.array_equal(cnd[0], lat[0].data[0:4])


@pytest.mark.parametrize("mode", ["ar", "transformer"])
def test_trained_sampler_same_seed_identical_other_seed_differs(world, mode):
    ddm = world["ddms"][mode]
    zc = world["lat"][1]
    grid = world["truth"].members[1].grid
    run = rollout_autoregressive if mode == "ar" else generate_transformer
    cfg = SamplerConfig(T=200, ddim_steps=4)
    length = 4 if mode == "ar" else 12

    def gen(seed):
        return run(ResidualSampler(ddm, cfg), world["vm"], zc, GenRequest(mode, n_members=2, length=length,
                                                                          seed=seed), grid=grid)

    a, b, c = gen(0), gen(0), gen(1)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))
    assert np.abs(a[0].data - c[0].data).max() > 0
    assert np.abs(a[0].data - a[1].data).max() > 0


def test_transformer_uses_fewer_invocations(world):
    zc = world["lat"][1]
    cfg = SamplerConfig(T=200, ddim_steps=2)
    s_ar = ResidualSampler(world["ddms"]["ar"], cfg)
    s_tf = ResidualSampler(world["ddms"]["transformer"], cfg)
    rollout_autoregressive(s_ar, None, zc, GenRequest("ar", n_members=1, length=24))
    generate_transformer(s_tf, None, zc, GenRequest("transformer", n_members=1, length=24))
    assert s_ar.invocations == 24 and s_tf.invocations == 2


def test_ddm_checkpoint_roundtrip(world, tmp_path):
    ddm = world["ddms"]["ar"]
    save_ddm(tmp_path / "a.ckp", ddm)
    back = load_ddm(tmp_path / "a.ckp")
    assert back.residual_scale == ddm.residual_scale and back.meta["cond_member"] == 0
    for (k1, v1), (k2, v2) in zip(ddm.unet.state_dict().items(), back.unet.state_dict().items()):
        assert k1 == k2 and torch.equal(v1, v2)
    save_ddm(tmp_path / "b.ckp", back)
    assert (tmp_path / "a.ckp").read_bytes() == (tmp_path / "b.ckp").read_bytes()


def test_train_ddm_rejects_bad_inputs():
    lat = {0: random_latents(30), 1: random_latents(30, shape=(2, 2, 4))}
    with pytest.raises(ConfigError):
        train_ddm(lat, 0, [1], tiny_unet("ar", c=2), DdmTrainConfig(epochs=1))
    lat = {0: random_latents(8), 1: random_latents(8, seed=1)}
    with pytest.raises(RangeError):
        train_ddm(lat, 0, [1], tiny_unet("transformer", c=2), DdmTrainConfig(epochs=1))


@pytest.mark.parametrize("mode", ["ar", "transformer"])
def test_generate_ensemble_files_manifest_and_envelope(world, tmp_path, mode):
    root = world["root"]
    length = 6 if mode == "ar" else 12
    req = GenRequest(mode, n_members=4, cond_member=1, length=length, sampler=SamplerConfig(ddim_steps=3), seed=3)
    hashes = []
    for run in ("a", "b"):
        man = generate_ensemble(req, root / "vae.ckp", root / f"{mode}.ckp", root / "lat_1.cgf", tmp_path / run)
        hashes.append([e["sha256"] for e in man["members"]])
    assert hashes[0] == hashes[1] and len(hashes[0]) == 4
    on_disk = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert on_disk["config"]["ddm_sha256"] == sha256_file(root / f"{mode}.ckp")
    assert {"id", "seed", "file", "sha256"} <= set(on_disk["members"][0])
    cond = world["vm"].decode_seq(world["lat"][1], world["truth"].members[1].grid)
    for e in man["members"]:
        seq = read_cgf(tmp_path / "a" / e["file"])
        assert np.all(np.isfinite(seq.data))
        # both generators start at the first conditioning month here
        assert np.abs(seq.data - cond.data[:len(seq)]).max() <= 15.0


def test_generate_ensemble_zero_members(world, tmp_path):
    root = world["root"]
    man = generate_ensemble(GenRequest("ar", n_members=0), root / "vae.ckp", root / "ar.ckp", root / "lat_1.cgf",
                            tmp_path)
    assert man["members"] == [] and not list(tmp_path.glob("*.cgf"))


def test_generate_ensemble_rejects_incompatible(world, tmp_path):
    root = world["root"]
    with pytest.raises(ConfigError):
        generate_ensemble(GenRequest("transformer", n_members=1), root / "vae.ckp", root / "ar.ckp",
                          root / "lat_1.cgf", tmp_path)
    bad = LatentSeq(np.zeros((12, 3, 4, 8), np.float32), 1950, 1, 1)
    write_cgf(tmp_path / "bad.cgf", bad)
    with pytest.raises(ConfigError):
        generate_ensemble(GenRequest("ar", n_members=1), root / "vae.ckp", root / "ar.ckp", tmp_path / "bad.cgf",
                          tmp_path / "o")
