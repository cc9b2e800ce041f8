"""Input sampling: plain Monte Carlo and midpoint Latin-hypercube designs.

Both draw from independent normal marginals Normal(mean_i, std_i). The
generator is numpy's PCG64 (``numpy.random.default_rng``) seeded with the
caller's integer, so equal (spec, n, seed) gives bit-identical output on a
given numpy version.
"""

from __future__ import annotations

import csv
import zlib
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .core import Origin, SampleMatrix, StudySpec, ValidationError


def derive_seed(seed: int, *stream: int | str) -> int:
    """Stable child seed for a named sub-stream of a study seed."""
    words = [seed] + [s if isinstance(s, int) else zlib.crc32(s.encode()) for s in stream]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0])


def draw_monte_carlo(spec: StudySpec, n: int, seed: int) -> SampleMatrix:
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, spec.d))
    values = spec.means + z * spec.std_devs
    return SampleMatrix(values, tuple(spec.variable_names), Origin.MONTE_CARLO)


def draw_regular_design(spec: StudySpec, n: int, seed: int) -> SampleMatrix:
    """Latin hypercube in probability space.

    Each column visits the n equiprobable strata of its normal marginal once,
    at the stratum's probability midpoint; the stratum order is an
    independent random permutation per column.
    """
    if n < 2:
        raise ValidationError("a regular design needs n >= 2")
    rng = np.random.default_rng(seed)
    strata = np.column_stack([rng.permutation(n) for _ in range(spec.d)])
    z = norm.ppf((strata + 0.5) / n)
    values = spec.means + z * spec.std_devs
    return SampleMatrix(values, tuple(spec.variable_names), Origin.REGULAR_DESIGN)


def write_samples_csv(samples: SampleMatrix, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(samples.variable_names)
        for row in samples.values:
            writer.writerow([repr(float(v)) for v in row])


def read_samples_csv(path: str | Path, origin: Origin = Origin.MONTE_CARLO) -> SampleMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    values = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return SampleMatrix(values, tuple(header), origin)
