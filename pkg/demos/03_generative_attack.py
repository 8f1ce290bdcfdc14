"""Train the one-pass generative attack and fool a detector.

A small image-to-image generator is trained once against a frozen
proposal-based victim, with a GAN loss (keep the output realistic), an L2
similarity loss (stay close to the input), a proposal misclassification
loss, and an attention-weighted feature loss that pushes the backbone's
foreground activations toward fixed random maps. After training, attacking
a new image is a single forward pass.
"""

from advdetect.data import generate_synthetic_dataset
from advdetect.detectors import DetectorConfig, train_toy_detector
from advdetect.evaluation import evaluate_attack
from advdetect.genattack import GeneratorConfig, generate, train_generator
from advdetect.losses import LossWeights

train = generate_synthetic_dataset(150, 3, seed=1, split="train")
test = generate_synthetic_dataset(30, 3, seed=2, split="test")

victim = train_toy_detector(
    "proposal", train, test, DetectorConfig(epochs=25, eval_every=4, seed=0)
)
print(f"victim mAP {victim.val_map:.3f}")

result = train_generator(
    victim,
    train,
    weights=LossWeights(),  # alpha=0.05, beta=1, epsilons=(1e-4, 2e-4)
    config=GeneratorConfig(epochs=3, seed=0),
)
print(f"trained for 3 epochs, final losses: {result.log[-1].as_dict()}")

clean = [e.load() for e in test.entries]
arts = [generate(result.generator, img) for img in clean]
report = evaluate_attack(
    lambda img: victim.detect(img, 0.0),
    clean,
    [a.adversarial for a in arts],
    [list(e.objects) for e in test.entries],
    test.num_classes,
)
print(report.summary())
print(f"mean attack time: {sum(a.wall_time for a in arts) / len(arts) * 1e3:.1f} ms/image")
