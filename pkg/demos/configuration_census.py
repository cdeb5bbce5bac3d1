"""Metastable configurations of a 91-ion crystal and their camera fingerprints.

Anneals from random starts at one anisotropy, groups the results into
symmetry classes, renders noisy frames of the lowest few and sorts the
frames back with eigenpictures and density clustering. About half a
minute on one core.
"""
from collections import Counter

import numpy as np

from planarion import equilibrium as eq
from planarion import imaging as im
from planarion.trapmath import K_B, PotentialSpec

spec = PotentialSpec.from_hz(2196e3, 680e3, 343e3).with_anisotropy(1.915)
classes = eq.enumerate_configurations(91, spec, 40)
mk = 1e3 * spec.units().energy_scale / K_B
print(f"{len(classes)} classes from 40 runs")
for k, c in enumerate(classes[:6]):
    g = im.neighbor_graph(c.representative)
    print(f"  class {k}: +{(c.energy - classes[0].energy) * mk:6.1f} mK, multiplicity {c.multiplicity}, "
          f"seen {c.occurrences}x, interior defects {g.defect_counts()}")

confs = [c.representative for c in classes[:4]]
shape = tuple(np.max([im.frame_shape_for(c, 1.5, 4.0) for c in confs], axis=0) + 8)
truth = np.arange(800) % 4
frames = [im.render(confs[k], 1.5, 4.0, 2000.0, 5.0, noise_seed=j, shape=shape) for j, k in enumerate(truth)]

basis = im.eigenpictures(frames, 8)
print("leading eigenvalues relative to the first:", np.array2string(basis.eigenvalues / basis.eigenvalues[0], precision=2))
# with only four configurations most of the eight coefficients carry shot
# noise alone; standardizing would blow that noise up to unit variance
labels = im.cluster(im.project_all(frames, basis), scale=False)
print(f"{labels.n_clusters} clusters, noise fraction {labels.noise_fraction:.3f}")
for k in range(4):
    print(f"  configuration {k} -> clusters {dict(Counter(labels.labels[truth == k].tolist()))}")
