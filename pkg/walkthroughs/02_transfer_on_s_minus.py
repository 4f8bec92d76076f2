"""Direct transfer: the last task of S- reuses the trunk of the first.

S- ends with the first task again, but with far less training data.  A
learner that finds the first task's path through the 5-NN prior beats the
same architecture trained from scratch on the small set.  Takes about twenty
seconds on one core.

    python walkthroughs/02_transfer_on_s_minus.py [seed]
"""

import sys

from mntdp import build_stream, make_learner, transfer

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
stream, data = build_stream("S-", "desk", seed)
for spec in stream.tasks:
    print(f"task {spec.task_id}: family {spec.family}, {spec.n_train} training examples")

mntdp = make_learner("mntdp_d", stream.input_dim, seed=seed)
for spec, d in zip(stream.tasks, data):
    out = mntdp.learn_task(spec, d)
    info = out.info
    print(f"  learned task {spec.task_id}: source task {info['source_task']}, "
          f"kept {info['reused_prefix']} module(s), +{out.params_added} params, test {out.test_accuracy:.3f}")

alone = make_learner("independent", stream.input_dim, seed=seed)
iso = alone.learn_task(stream.tasks[-1], data[-1]).test_accuracy
last = mntdp.outcomes[stream.tasks[-1].task_id].test_accuracy
print(f"last task: in stream {last:.3f}, trained alone {iso:.3f}, transfer {transfer(last, iso):+.3f}")
print("earlier tasks unchanged:", mntdp.library.verify_frozen())
