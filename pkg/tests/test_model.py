import numpy as np
import pytest

from mera.errors import DimensionError, RegistrationError, RoutingError
from mera.model import (
    Backbone,
    Connector,
    Encoder,
    Head,
    ModelDims,
    MultimodalModel,
    probe_drift,
    snapshot_probe,
    tag_of,
)
from mera.nnkernel import Graph

DIMS = ModelDims(feat_dim=8, embed_dim=8, encoder_hidden=12, classes=(("capA", 4), ("qaA", 4)))


def two_modality_model():
    m = MultimodalModel.fresh(DIMS, seed=0)
    m = m.register_modality("image", 6, encoder_seed=1, connector_seed=2)
    return m.register_modality("audio", 5, encoder_seed=1, connector_seed=3)


def test_namespaces_partition_parameters():
    m = two_modality_model()
    agn, spec = set(m.agnostic_names()), set(m.specific_names())
    assert agn.isdisjoint(spec)
    assert agn | spec == set(m.params.names())
    assert all(n.startswith(("backbone.", "head.")) for n in agn)
    assert m.names_for([Connector("audio")]) == ["connector.audio.b", "connector.audio.w"]
    assert tag_of("encoder.image.w1") == Encoder("image")
    assert tag_of("head.qaA.b") == Head("qaA")
    assert Backbone().matches(tag_of("backbone.ln.g"))


def test_encoder_depends_only_on_seed_and_modality():
    a = MultimodalModel.fresh(DIMS, 0).register_modality("image", 6, 7, 1)
    b = MultimodalModel.fresh(DIMS, 99).register_modality("image", 6, 7, 2)
    names = a.names_for([Encoder("image")])
    assert a.params.digest(names) == b.params.digest(names)
    assert a.params.digest(a.names_for([Connector()])) != b.params.digest(b.names_for([Connector()]))


def test_registration_is_copy_on_write_and_unique():
    base = MultimodalModel.fresh(DIMS, 0)
    m = base.register_modality("image", 6, 1, 2)
    assert "image" not in base.modalities
    with pytest.raises(RegistrationError):
        m.register_modality("image", 6, 1, 2)
    with pytest.raises(RegistrationError):
        m.register_modality("bad.id", 6, 1, 2)


def test_forward_shapes_and_routing_errors():
    m = two_modality_model()
    x = np.zeros((3, 6), np.float32)
    assert m.logits("image", x, "capA").shape == (3, 4)
    with pytest.raises(RoutingError):
        m.logits("video", x, "capA")
    with pytest.raises(DimensionError):
        m.logits("audio", x, "capA")
    with pytest.raises(RoutingError):
        m.logits("image", x, "nope")


def test_frozen_components_stay_bitwise_fixed_under_backward():
    m = two_modality_model()
    x = np.random.default_rng(0).standard_normal((4, 6)).astype(np.float32)
    train = m.names_for([Connector("image")])
    g = Graph(m.params, train)
    g.backward(g.cross_entropy(m.forward(g, "image", x, "capA"), [0, 1, 2, 3]))
    for n in m.params.names():
        assert (m.params.grad(n) is not None) == (n in train)


def test_fit_encoder_recovers_a_linear_target():
    wide = ModelDims(feat_dim=8, embed_dim=8, encoder_hidden=64, classes=DIMS.classes)
    m = MultimodalModel.fresh(wide, 0).register_modality("image", 6, 1, 2)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2000, 6)).astype(np.float32)
    target = (x @ rng.standard_normal((6, 8))).astype(np.float32)
    fitted = m.fit_encoder("image", x, target)
    feats = fitted.features("image", x)
    g = Graph(fitted.params)
    enc = fitted.encode(g, "image", g.const(x)).value
    r2 = 1 - ((enc - target) ** 2).sum() / ((target - target.mean(0)) ** 2).sum()
    assert r2 > 0.9 and feats.shape == (2000, 8)
    names = [n for n in m.params.names() if not n.startswith("encoder.image.w2")
             and not n.startswith("encoder.image.b2")]
    assert fitted.params.digest(names) == m.params.digest(names)
    with pytest.raises(DimensionError):
        m.fit_encoder("image", x, target[:, :3])


def test_probe_drift_zero_for_identical_and_positive_after_change():
    m = two_modality_model()
    x = np.random.default_rng(1).standard_normal((64, 6)).astype(np.float32)
    a = snapshot_probe(m, "image", x, tap="backbone")
    assert probe_drift(a, snapshot_probe(m, "image", x, tap="backbone")) == 0.0
    m2 = m.copy()
    m2.params["backbone.w1"] = m2.params["backbone.w1"] * 1.5
    assert probe_drift(a, snapshot_probe(m2, "image", x, tap="backbone")) > 0
    # the connector tap ignores the backbone entirely
    c = snapshot_probe(m, "image", x, tap="connector")
    assert probe_drift(c, snapshot_probe(m2, "image", x, tap="connector")) == 0.0
