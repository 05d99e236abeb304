import numpy as np

from fbanet import network as N
from fbanet.attention import FeaturePatternSet


def toy_network(seed: int = 11) -> N.Network:
    """Fixed-seed network with three ReLU layers (two conv, one fc) on 2x8x8 inputs."""
    spec = N.make_spec((2, 8, 8), [
        ("conv", dict(out_channels=4, kernel=3, pad=1)), ("relu", {}), ("maxpool", dict(size=2, stride=2)),
        ("conv", dict(out_channels=5, kernel=3, pad=1)), ("relu", {}),
        ("fc", dict(out_features=6)), ("relu", {}),
        ("fc", dict(out_features=3)), ("softmax", {}),
    ])
    net = N.init_network(spec, seed)
    rng = np.random.default_rng(seed)
    for k, b in net.params.values():
        b[:] = rng.normal(0, 0.2, b.shape)
    return net


def random_patterns(net: N.Network, categories=("a", "b"), seed: int = 0) -> FeaturePatternSet:
    rng = np.random.default_rng(seed)
    layers = sorted(net.spec.relu_positions)
    pats = {(l, c): rng.normal(0, 1, net.spec.relu_channels(l)).astype(np.float32) for l in layers for c in categories}
    return FeaturePatternSet(list(categories), layers, pats, {c: 10 for c in categories})
