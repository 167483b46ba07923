import json

import numpy as np
import pytest

from sm3.errors import ChecksumError, ConfigError, MissingArtifactError, StructureError, VersionMismatchError
from sm3.store import blob_path, write_artifact
from sm3.synthdata import GeneratorConfig, generate, load, save


@pytest.fixture(scope="module")
def ds():
    return generate(GeneratorConfig(seed=3))


def test_deterministic(ds):
    assert ds.equals(generate(GeneratorConfig(seed=3)))
    assert not ds.equals(generate(GeneratorConfig(seed=4)))


def test_shapes_and_splits(ds):
    cfg = ds.config
    assert ds.x_derm.shape == (cfg.n_samples, cfg.derm_dim) and ds.x_clinic.shape == (cfg.n_samples, cfg.clinic_dim)
    assert ds.labels.shape == (cfg.n_samples, 8)
    parts = [ds.split(s) for s in ("train", "val", "test")]
    allidx = np.concatenate(parts)
    assert len(allidx) == len(set(allidx.tolist())) == cfg.n_samples
    fracs = np.array([len(p) for p in parts]) / cfg.n_samples
    np.testing.assert_allclose(fracs, [413 / 1011, 203 / 1011, 395 / 1011], atol=2e-3)
    assert len(ds.samples) == cfg.n_samples and ds[0].derm.shape == (cfg.derm_dim,)


def test_label_marginals_near_uniform(ds):
    n = len(ds)
    for k, c in enumerate(ds.class_counts):
        freq = np.bincount(ds.labels[:, k], minlength=c)
        assert np.all(np.abs(freq - n / c) <= 3 * np.sqrt(n)), (k, freq)


def test_noise_free_linear_data_determines_latent():
    cfg = GeneratorConfig(n_samples=50, latent_dim=4, derm_dim=10, noise_std=0.0, private_dim=0, nonlinear=False)
    d = generate(cfg)
    coef, *_ = np.linalg.lstsq(d.x_derm.astype(np.float64), d.latent.astype(np.float64), rcond=None)
    np.testing.assert_allclose(d.x_derm @ coef, d.latent, atol=1e-4)


def test_within_pair_alignment_beats_across_pair(ds):
    u = ds.latent.astype(np.float64)
    un = u / np.linalg.norm(u, axis=1, keepdims=True)
    cos = un @ un.T
    off = cos[~np.eye(len(u), dtype=bool)]
    assert np.allclose(np.diag(cos), 1.0) and abs(off.mean()) < 0.05


def test_raw_features_predict_labels_above_chance(ds):
    from sklearn.linear_model import LogisticRegression
    tr, te = ds.split("train"), ds.split("test")
    for k, c in enumerate(ds.class_counts):
        clf = LogisticRegression(max_iter=2000).fit(ds.x_derm[tr], ds.labels[tr, k])
        assert clf.score(ds.x_derm[te], ds.labels[te, k]) > 1 / c + 0.1


def test_class_priors_knob():
    cfg = GeneratorConfig(n_samples=4000, class_counts=(2, 3), class_priors=[[0.9, 0.1], None])
    freq = np.bincount(generate(cfg).labels[:, 0]) / 4000
    assert freq[0] == pytest.approx(0.9, abs=0.03)


@pytest.mark.parametrize("kwargs", [
    {"class_counts": (3, 1)}, {"n_samples": 0}, {"derm_dim": 0}, {"noise_std": -1.0},
    {"split": (0.5, 0.5, 0.5)}, {"class_counts": ()}, {"class_priors": [[0.5, 0.5]]},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        GeneratorConfig(**kwargs)


def test_roundtrip_bitwise(ds, tmp_path):
    path = save(ds, tmp_path / "d.json")
    back = load(path)
    assert back.equals(ds)
    assert back.labels.dtype == np.int64


def test_truncated_blob_is_checksum_error(ds, tmp_path):
    path = save(ds, tmp_path / "d.json")
    b = blob_path(path)
    b.write_bytes(b.read_bytes()[:-100])
    with pytest.raises(ChecksumError):
        load(path)


def test_declared_count_mismatch_is_structure_error(tmp_path):
    small = generate(GeneratorConfig(n_samples=9, seed=0))
    meta = {"n_samples": 10, "config": small.config.to_dict(),
            "splits": {"train": list(range(5)), "val": [5, 6], "test": [7, 8, 9]}}
    tensors = {"x_derm": small.x_derm, "x_clinic": small.x_clinic, "labels": small.labels.astype(np.float32)}
    write_artifact(tmp_path / "bad.json", "sm3-dataset", 1, meta, tensors)
    with pytest.raises(StructureError):
        load(tmp_path / "bad.json")


def test_version_and_missing(ds, tmp_path):
    path = save(ds, tmp_path / "d.json")
    manifest = json.loads(path.read_text())
    manifest["version"] = 99
    path.write_text(json.dumps(manifest))
    with pytest.raises(VersionMismatchError):
        load(path)
    with pytest.raises(MissingArtifactError):
        load(tmp_path / "nope.json")
    (tmp_path / "junk.json").write_text("{not json")
    with pytest.raises(StructureError):
        load(tmp_path / "junk.json")
