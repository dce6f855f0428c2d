"""Train a small deeply supervised UNet++ on synthetic blobs, then compare the
ensemble output with each pruned level on the test split."""
import numpy as np

from unetlab import SynthConfig, TrainConfig, evaluate, gen_synthetic, train
from unetlab.arch import ArchSpec
from unetlab.trainer import model_from_checkpoint

data = gen_synthetic(SynthConfig(count=60, size=(32, 32), radius=(2.0, 9.0)))
spec = ArchSpec("unet_pp", 3, (4, 8, 16, 32), 1, True, (1, 32, 32))
ck, history = train(spec, data, TrainConfig(learning_rate=3e-3, max_epochs=10, seed=1))
print(f"trained {len(history.rows)} epochs, best epoch {history.best_epoch}")

model = model_from_checkpoint(ck)
test = data.split("test")
for mode in ("ensemble", "pruned:3", "pruned:2", "pruned:1"):
    rows = evaluate(model, test, mode)
    print(f"{mode:9s} IoU={np.mean([r['IoU'] for r in rows]):.3f} Dice={np.mean([r['Dice'] for r in rows]):.3f}")
