"""How the distillation weight psi moves during training.

On a homogeneous population the personalized models stay close to the
global one and psi drops; on heterogeneous tasks it stays higher. Noise on
the global-model update pushes it up further.
"""

from fedbayes import ClipSpec
from fedbayes.adaped import (AdaPedConfig, Classifier, DpAdaPedConfig, adaped_run, dp_adaped_run,
                             fedavg_classifier, local_only_run, synthetic_classification_tasks)

import numpy as np

model = Classifier(10, 2)
cfg = AdaPedConfig(T=300, tau=5)
train, test, _ = synthetic_classification_tasks(30, 50, 10, rng=0)
hom, _, _ = synthetic_classification_tasks(30, 50, 10, rng=0, homogeneous=True)

het_run = adaped_run(train, cfg, 0, model, test)
hom_run = adaped_run(hom, cfg, 0, model)
noisy = dp_adaped_run(train, cfg, DpAdaPedConfig(ClipSpec(1.0, 1.0), 10.0, 0.5), 0, model, test)

print(f"accuracy: adaped {het_run.mean_accuracy:.4f}  "
      f"local {local_only_run(train, cfg, 0, model, test).mean_accuracy:.4f}  "
      f"fedavg {np.mean(fedavg_classifier(train, cfg, 0, model, test)[1]):.4f}  "
      f"noisy {noisy.mean_accuracy:.4f}")
print("  t   psi(het)  psi(hom)  psi(noisy)")
for h1, h2, h3 in list(zip(het_run.history, hom_run.history, noisy.history))[::30]:
    print(f"{h1['t']:4d}  {h1['psi']:8.4f}  {h2['psi']:8.4f}  {h3['psi']:10.4f}")
