"""Random small architectures and models for engine equivalence checks."""

import numpy as np

from conftest import randomize_bn
from tsrbnn.arch import ArchError, parse_arch
from tsrbnn.network import build_model


def random_arch_text(rng, max_layers=4, max_channels=8):
    """QConv first, then random QConv/MP/BN/D tokens, then D(classes).

    At most ``max_layers`` weighted layers (including the first conv and the output dense).
    """
    size = int(rng.integers(6, 13))
    while True:
        k = int(rng.integers(1, 4))
        tokens = [f"QConv({rng.integers(1, max_channels + 1)},{k}x{k})"]
        dense = False
        weighted = 1
        for _ in range(int(rng.integers(0, 2 * max_layers))):
            choices = ["BN"] if dense else ["MP", "BN"]
            if weighted < max_layers - 1:
                choices += ["D"] if dense else ["QConv", "D"]
            kind = choices[int(rng.integers(len(choices)))]
            weighted += kind in ("QConv", "D")
            if kind == "QConv":
                k = int(rng.integers(1, 4))
                tokens.append(f"QConv({rng.integers(1, max_channels + 1)},{k}x{k})")
            elif kind == "D":
                tokens.append(f"D({rng.integers(1, max_channels + 1)})")
                dense = True
            else:
                tokens.append(kind)
        tokens.append(f"D({rng.integers(2, max_channels + 1)})")
        text = ", ".join(tokens)
        try:
            return parse_arch(text, size)
        except ArchError:
            continue


def random_model(rng, tie_fraction=0.3, **kw):
    arch = random_arch_text(rng, **kw)
    model = build_model(arch, rng)
    randomize_bn(model, rng)
    # integral thresholds on some channels create exact ties on integer pre-activations
    for bn in model.batchnorms():
        tie = rng.random(bn.channels) < tie_fraction
        bn.moving_mean[tie] = np.round(bn.moving_mean[tie])
        bn.beta.value[tie] = 0.0
    return model


def pixel_images(rng, n, size):
    return (rng.integers(0, 256, size=(n, size, size, 3)) / 255).astype(np.float32)
