import os

import numpy as np

from config.settings import settings
from src.core import Image, make_rng
from src.loader import save_image, write_mlp_weights
from src.scenes import smooth_field
from src.victim import MlpLayer, mlp_victim_from_layers

# Configuration
SEED = 7
SHAPE = (1, 16, 16)
HIDDEN = 32
CLASSES = 10

EXPERIMENTS = {
    "attack_full": {"subspace": "kind = full"},
    "attack_spatial": {"subspace": "kind = spatial\nratio = 4"},
    "attack_dct": {"subspace": "kind = dct\nratio = 4"},
    "attack_pca": {"subspace": "kind = pca\nratio = 4\nprobes = 256\nreferences = 5"},
}

EXPERIMENT_TEMPLATE = """# generated by make_fixtures.py
[experiment]
name = {name}
repetitions = 5
seed = 0
max_queries = 20000
batch_size = 100
thresholds = 1e-3, 1e-4
budgets = 1000, 5000, 10000, 20000

[victim]
kind = quadratic
channels = 3
height = 32
width = 32

[subspace]
{subspace}
"""

MLP_TEMPLATE = """# generated by make_fixtures.py
[experiment]
name = attack_mlp
repetitions = 3
seed = 0
max_queries = 5000
batch_size = 50
thresholds = 1e-2, 1e-3
budgets = 1000, 2500, 5000

[victim]
kind = mlp
weights = {weights}
source = {source}
target = {target}

[subspace]
kind = dct
ratio = 2
"""

THEORY_TEMPLATE = """# generated by make_fixtures.py
[theory]
name = theory
victim = quadratic
channels = 3
height = 32
width = 32
dims = 3072, 192
batches = 16, 64, 100
deltas = 1e-2, 1e-3
rhos = 1.0, 0.5
trials = 200
seed = 0
"""


def random_network(rng):
    m = int(np.prod(SHAPE))
    return [
        MlpLayer(rng.standard_normal((HIDDEN, m)) / np.sqrt(m), 0.1 * rng.standard_normal(HIDDEN), "relu"),
        MlpLayer(rng.standard_normal((CLASSES, HIDDEN)) / np.sqrt(HIDDEN), np.zeros(CLASSES), "identity"),
    ]


def random_image(rng):
    field = smooth_field(SHAPE, 4, rng)
    return np.clip(0.5 + 0.3 * field / np.max(np.abs(field)), 0.0, 1.0)


def make_mlp_pair(rng):
    """
    Picks two images and shifts the class-0 output bias so the one with the
    larger class-0 margin is malicious and the other is not.
    """
    layers = random_network(rng)
    victim = mlp_victim_from_layers(layers, malicious_class=0)
    a, b = random_image(rng), random_image(rng)
    margin_a, margin_b = victim.score(a), victim.score(b)
    if margin_a == margin_b:
        raise RuntimeError("degenerate pair, try another seed")
    if margin_a < margin_b:
        a, b = b, a
        margin_a, margin_b = margin_b, margin_a
    layers[-1].bias[0] = -(margin_a + margin_b) / 2.0
    victim = mlp_victim_from_layers(layers, malicious_class=0)
    assert victim.phi(a) == 1 and victim.phi(b) == -1
    return layers, a, b


def generate_data(output_dir=None):
    output_dir = output_dir or settings.app.input_dir
    os.makedirs(output_dir, exist_ok=True)
    rng = make_rng(SEED)
    for name, parts in EXPERIMENTS.items():
        path = os.path.join(output_dir, f"{name}.ini")
        with open(path, "w") as f:
            f.write(EXPERIMENT_TEMPLATE.format(name=name, **parts))
        print(f"Generated {path}")

    layers, source, target = make_mlp_pair(rng)
    weights = os.path.join(output_dir, "victim.qmlp")
    write_mlp_weights(weights, layers, malicious_class=0)
    source_path = os.path.join(output_dir, "source.qimg")
    target_path = os.path.join(output_dir, "target.qimg")
    save_image(source_path, Image(source, SHAPE))
    save_image(target_path, Image(target, SHAPE))
    mlp_path = os.path.join(output_dir, "attack_mlp.ini")
    with open(mlp_path, "w") as f:
        f.write(MLP_TEMPLATE.format(weights=weights, source=source_path, target=target_path))
    print(f"Generated {mlp_path} with victim weights {weights}")

    theory_path = os.path.join(output_dir, "theory.ini")
    with open(theory_path, "w") as f:
        f.write(THEORY_TEMPLATE)
    print(f"Generated {theory_path}")


if __name__ == "__main__":
    generate_data()
