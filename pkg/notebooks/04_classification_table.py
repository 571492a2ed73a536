# Real vs real+generated classification accuracy, laid out with iterations down the side.
import sys

from xmgc import data_pipeline as dp
from xmgc import evaluation as ev
from xmgc import training

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
gen_iterations = int(sys.argv[2]) if len(sys.argv) > 2 else 400
classes = 11

train_pairs = dp.make_synthetic_pairs(classes, 8, 64, seed=10)
test_pairs = dp.make_synthetic_pairs(classes, 3, 64, seed=11)  # new phases and noise

# generated tactile images come from a translator trained on the training pairs
cfg = training.TrainingConfig(resolution=64, iterations=gen_iterations, l1_weight=100.0, jitter_margin=8,
                              gen_depth=5, gen_base_filters=16, disc_base_filters=16)
ck = training.train(cfg, train_pairs).checkpoint
fake = training.generate(ck, [p.visual for p in train_pairs])

real = [dp.LabeledImage(p.tactile, p.class_id, p.source_id) for p in train_pairs]
# synthetic ids restart at every seed, so tag the held-out ones
test = [dp.LabeledImage(p.tactile, p.class_id, "heldout:" + p.source_id) for p in test_pairs]
generated = [dp.LabeledImage(img, p.class_id, "gen:" + p.source_id, True) for img, p in zip(fake, train_pairs)]

table = ev.classification_protocol(real, test, classes, epochs, seed=0, generated=generated, modality="tactile")
print(ev.format_wide(table))
