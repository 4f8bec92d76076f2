"""A module library, its paths, and the restricted search space.

Builds a 4-layer library by hand, commits two task paths, and shows that
the candidate set for a new task holds exactly one path per layer however
many modules the library accumulates.

    python walkthroughs/01_module_library.py
"""

import numpy as np

from mntdp import ModuleLibrary, Path, candidate_paths
from mntdp.graph import FrozenModuleError, load_snapshot_bytes, snapshot_bytes

lib = ModuleLibrary(input_dim=40, hidden_dim=16, n_layers=4)

# task 0: one fresh module per layer, head sized to the task's classes
p0 = Path([lib.spawn_new_module(layer, [0, 0, 0, layer], 5 if layer == 3 else None) for layer in range(4)])
lib.commit_path(p0, 0)
print("task 0 path:", [tuple(m) for m in p0])

mod = lib[p0[0]]
try:
    mod.weight[0, 0] = 1.0
except ValueError:
    print("committed weights are read-only")
try:
    mod.set_params(mod.weight * 0, mod.bias)
except FrozenModuleError as exc:
    print("set_params on a frozen module:", exc)

# candidates for task 1 branch right off the task 0 path
cands = candidate_paths(lib, p0, task=1, n_classes=5, seed=0)
for c, (path, pre) in enumerate(zip(cands, cands.prefix_lengths)):
    print(f"candidate {c}: reuses {pre} module(s) ->", [tuple(m) for m in path])

# commit the one that keeps the trunk; the other fresh modules are discarded
lib.commit_path(cands.candidates[3], 1)
print("modules after two tasks:", lib.n_modules(), "params:", lib.n_params())

# keep adding tasks: the candidate count stays at n_layers
for task in range(2, 20):
    cs = candidate_paths(lib, lib.task_paths[task - 1], task, 5, seed=0)
    lib.commit_path(cs.candidates[task % 4], task)
print("after 20 tasks:", lib.n_modules(), "modules,",
      len(candidate_paths(lib, lib.task_paths[19], 20, 5, seed=0)), "candidates for the next task")

# snapshots round-trip every frozen weight and binding
copy, _, _ = load_snapshot_bytes(snapshot_bytes(lib))
x = np.random.default_rng(0).random((3, 40))
same = all(np.array_equal(lib.predict(p, x), copy.predict(p, x)) for p in lib.task_paths.values())
print("snapshot round trip identical:", same, "| checksums intact:", copy.verify_frozen())
