import numpy as np
import pytest

from scmd.data import gen_synthetic
from scmd.errors import (
    ArtifactValidationError,
    BadMagicError,
    ChecksumError,
    MissingEmbeddingError,
    ParameterError,
    TemplateError,
    TruncatedArtifactError,
)
from scmd.teacher import (
    OracleTeacherConfig,
    TeacherArtifact,
    load_artifact,
    make_oracle_teacher,
    render_prompts,
    save_artifact,
    teacher_soft_targets,
    zero_shot_accuracy,
)


def _basis_artifact(with_images=False):
    text = np.eye(3, 4)
    kw = {}
    if with_images:
        kw = dict(image_ids=[5, 2, 9],
                  image_embeddings=np.eye(3, 4)[[1, 0, 2]])
    return TeacherArtifact(class_names=["ant", "bee", "cat"],
                           prompt_template="a photo of a {}",
                           text_embeddings=text, logit_scale=7.5, **kw)


def test_round_trip_is_bit_exact(tmp_path, small_dataset, small_teacher):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_artifact(small_teacher, p1)
    loaded = load_artifact(p1)
    save_artifact(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert (loaded.text_embeddings == small_teacher.text_embeddings).all()
    assert (loaded.image_embeddings == small_teacher.image_embeddings).all()
    assert (loaded.image_ids == small_teacher.image_ids).all()
    assert loaded.class_names == small_teacher.class_names
    assert loaded.prompt_template == small_teacher.prompt_template
    assert loaded.logit_scale == small_teacher.logit_scale


def test_single_byte_corruption_is_detected(tmp_path, small_teacher):
    path = tmp_path / "t.bin"
    save_artifact(small_teacher, path)
    blob = bytearray(path.read_bytes())
    rng = np.random.default_rng(0)
    for pos in rng.choice(len(blob), size=60, replace=False):
        mutated = bytearray(blob)
        mutated[pos] ^= 0x40
        path.write_bytes(bytes(mutated))
        with pytest.raises((ChecksumError, BadMagicError, TruncatedArtifactError)):
            load_artifact(path)


def test_payload_corruption_is_a_crc_error(tmp_path, small_teacher):
    path = tmp_path / "t.bin"
    save_artifact(small_teacher, path)
    blob = bytearray(path.read_bytes())
    blob[-20] ^= 0x01  # inside the float payload
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_artifact(path)


def test_truncated_file_is_detected(tmp_path, small_teacher):
    path = tmp_path / "t.bin"
    save_artifact(small_teacher, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:6])
    with pytest.raises(TruncatedArtifactError):
        load_artifact(path)


def test_non_unit_row_is_named():
    text = np.eye(3, 4)
    text[1] *= 0.9
    with pytest.raises(ArtifactValidationError, match="row 1"):
        TeacherArtifact(class_names=["a", "b", "c"], prompt_template="a {}",
                        text_embeddings=text, logit_scale=1.0)


def test_oracle_teacher_noiseless_is_perfect(small_dataset):
    cfg = OracleTeacherConfig(embed_dim=8, anchor_seed=1, image_noise=0.0,
                              logit_scale=10.0)
    t = make_oracle_teacher(cfg, small_dataset)
    assert zero_shot_accuracy(t, small_dataset) == 1.0


def test_oracle_anchor_cosines_below_half(small_teacher):
    text = small_teacher.text_embeddings
    cos = text @ text.T
    off = cos - np.diag(np.diag(cos))
    assert off.max() < 0.5


def test_oracle_teacher_accuracy_regression():
    # frozen pilot: image_noise 0.5, 4 classes, embed_dim 16
    ds = gen_synthetic(num_classes=4, num_domains=4, n_per_domain=100,
                       feature_dim=8, shift_strength=0.3, noise=0.1, seed=123)
    cfg = OracleTeacherConfig(embed_dim=16, anchor_seed=21, image_noise=0.5,
                              logit_scale=10.0)
    t = make_oracle_teacher(cfg, ds)
    assert zero_shot_accuracy(t, ds) == pytest.approx(0.7925, abs=1e-12)


def test_oracle_rejects_embed_dim_below_classes(small_dataset):
    with pytest.raises(ParameterError):
        make_oracle_teacher(OracleTeacherConfig(embed_dim=2), small_dataset)


def test_soft_targets_rows_sum_to_one(small_teacher, small_dataset):
    ids = small_dataset.ids()[:10]
    p = teacher_soft_targets(small_teacher, ids, temperature=3.0)
    assert p.shape == (10, small_dataset.num_classes)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_soft_targets_huge_temperature_is_uniform(small_teacher, small_dataset):
    p = teacher_soft_targets(small_teacher, small_dataset.ids()[:5], temperature=1e6)
    np.testing.assert_allclose(p, 1.0 / small_dataset.num_classes, atol=1e-3)


def test_soft_targets_sharp_when_image_matches_text():
    text = np.eye(3, 8)
    art = TeacherArtifact(class_names=["a", "b", "c"], prompt_template="a {}",
                          text_embeddings=text, logit_scale=100.0,
                          image_ids=[0], image_embeddings=text[[0]])
    p = teacher_soft_targets(art, [0], temperature=1.0)
    assert p[0, 0] > 0.99


def test_soft_targets_argmax_invariant_to_temperature(small_teacher, small_dataset):
    ids = small_dataset.ids()[:20]
    a = teacher_soft_targets(small_teacher, ids, temperature=0.7).argmax(axis=1)
    for t in (1.0, 3.0, 10.0):
        b = teacher_soft_targets(small_teacher, ids, temperature=t).argmax(axis=1)
        np.testing.assert_array_equal(a, b)


def test_soft_targets_missing_id_names_it(small_teacher):
    with pytest.raises(MissingEmbeddingError, match="999999"):
        teacher_soft_targets(small_teacher, [999999], temperature=1.0)


def test_render_prompts():
    assert render_prompts(["dog"], "this is a photo of a {}") == \
        ["this is a photo of a dog"]
    assert render_prompts(["dog"], "a {}") == ["a dog"]


def test_render_prompts_rejects_bad_templates():
    with pytest.raises(TemplateError):
        render_prompts(["dog"], "no placeholder")
    with pytest.raises(TemplateError):
        render_prompts(["dog"], "{} and {}")


def test_image_ids_stored_ascending(tmp_path):
    art = _basis_artifact(with_images=True)
    np.testing.assert_array_equal(art.image_ids, [2, 5, 9])
    # row order follows the id sort
    np.testing.assert_array_equal(art.image_rows([5]), np.eye(3, 4)[[1]])
    path = tmp_path / "x.bin"
    save_artifact(art, path)
    loaded = load_artifact(path)
    np.testing.assert_array_equal(loaded.image_ids, [2, 5, 9])


def test_text_only_artifact_round_trip(tmp_path):
    art = _basis_artifact(with_images=False)
    path = tmp_path / "t.bin"
    save_artifact(art, path)
    loaded = load_artifact(path)
    assert loaded.num_samples == 0
    assert loaded.image_ids is None
    with pytest.raises(MissingEmbeddingError):
        loaded.image_rows([0])
