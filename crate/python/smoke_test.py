"""Quick checks of the Python bindings. Run after installing crates/py."""

import json
import math
import random

import stochident


def check_mesh():
    coarse = stochident.Mesh.unit_square(4)
    fine = coarse.refine()
    assert (coarse.n_vertices, coarse.n_elements) == (25, 32)
    assert (fine.n_vertices, fine.n_elements) == (81, 128)
    assert len(fine.boundary_vertices()) == 32
    line = stochident.Mesh.interval(30)
    assert line.dim == 1 and line.n_vertices == 31


def check_sparse_grid():
    grid = stochident.SparseGrid(3, 4)
    assert grid.num_nodes == 69
    nodes = grid.nodes()
    values = [[1.0 + y[0] - 2.0 * y[1] * y[2] for y in nodes]]
    surpluses = grid.hierarchize(values)
    back = grid.dehierarchize(surpluses)
    assert max(abs(a - b) for a, b in zip(back[0], values[0])) < 1e-12
    y = [0.3, 0.7, 0.1]
    got = grid.interpolate(surpluses[0], y)
    assert abs(got - (1.0 + y[0] - 2.0 * y[1] * y[2])) < 1e-12


def check_kl():
    rng = random.Random(3)
    n = 12
    modes = [[math.sin((k + 1) * math.pi * (i + 1) / (n + 1)) for i in range(n)] for k in range(2)]
    samples = [[0.0] * 400 for _ in range(n)]
    for s in range(400):
        a, b = rng.uniform(-1, 1), 0.3 * rng.uniform(-1, 1)
        for i in range(n):
            samples[i][s] = a * modes[0][i] + b * modes[1][i]
    gram = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    model = stochident.kl_fit(samples, gram, tol=1e-10)
    assert model["rank"] == 2, model["eigenvalues"][:4]
    values, vectors = stochident.kl_decompose([[2.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]])
    assert values == [2.0, 1.0] and len(vectors) == 2


def check_example():
    config = json.loads(stochident.example_config(1))
    assert config["q_cells"] == 30 and config["seed"] == 7
    summaries = stochident.run_example(1, level=2, n_mc=2000)
    assert len(summaries) == 1 and summaries[0]["iterations"] >= 1
    print("example 1 at level 2:", summaries[0])


if __name__ == "__main__":
    check_mesh()
    check_sparse_grid()
    check_kl()
    check_example()
    print("python bindings OK")
