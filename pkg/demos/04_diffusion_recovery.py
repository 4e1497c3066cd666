"""Demo 04: recovering a missing feature channel with a conditional sampler.

Trains a small noise-prediction model on latents drawn from three class
clusters, then samples each class back out of pure noise while steering with
a class-coded condition vector.  Two numbers tell the story:

  * centroid error -- distance between the mean of the samples and the true
    class mean.  A zero-filled channel scores ||mean|| by definition, so
    beating that baseline means the sampler carries real information.
  * assignment rate -- fraction of samples landing nearest their own class
    mean.  Chance is 1/3 here.

Sweeping the guidance weight shows the tradeoff: w=0 gives the tightest
centroids, larger w sharpens class identity at the price of more spread.

Run:  python3 demos/04_diffusion_recovery.py
"""

import numpy as np

from fedrecover import diffusion as D
from fedrecover import tensor as T
from fedrecover.optim import Adam

rng = np.random.default_rng(6)

# ---------------------------------------------------------------- setup
# Three class clusters on a sphere of radius 2.4 with unit noise, roughly
# the geometry the synthetic corpus produces after encoding.
D_LATENT, S_TOK, P_TOK = 8, 2, 4
N_CLASSES, N_TRAIN = 3, 240
WIDTH = D.condition_width(D_LATENT, P_TOK)

sched = D.NoiseSchedule.linear(100, 1e-3, 0.1)

dirs = rng.normal(size=(N_CLASSES, D_LATENT))
means = 2.4 * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
labels = rng.integers(0, N_CLASSES, size=N_TRAIN)
latents = means[labels] + rng.normal(size=(N_TRAIN, D_LATENT))

# Hand-built conditions: each class claims a 14-wide block of the condition
# vector.  (In the full pipeline this vector comes from the two graph and
# semantic encoders run on the channels that are still present.)
conds = np.zeros((N_TRAIN, WIDTH))
for i, k in enumerate(labels):
    conds[i, k * 14:(k + 1) * 14] = 2.0

print("setup")
print(f"  latent dim {D_LATENT} as {S_TOK}x{P_TOK} tokens, condition width {WIDTH}")
print(f"  class mean norms {np.round(np.linalg.norm(means, axis=1), 2)}")
print(f"  zero-fill centroid error (the baseline to beat): 2.40")

# ---------------------------------------------------------------- train
model = D.init_diffusion_model(
    rng, D_LATENT, S_TOK, P_TOK, WIDTH, sched, n_blocks=1, time_dim=8
)
opt = Adam(lr=5e-3)
z0_tokens = latents.reshape(-1, S_TOK, P_TOK)

print("\ntraining (2500 steps, p_drop=0.1 so the unconditional branch learns too)")
for step in range(2500):
    for p in model.params.values():
        p.grad = None
    loss = D.diffusion_train_step(model, z0_tokens, conds, p_drop=0.1, rng=rng)
    opt.step(model.params)
    if step % 500 == 0 or step == 2499:
        print(f"  step {step:4d}  noise-prediction loss {loss:.3f}")
# The loss does not go to zero: with unit within-class noise the best
# possible predictor still has posterior uncertainty about which draw
# produced the noisy latent.

# ---------------------------------------------------------------- sample
def sample_class(k, w, n=60):
    cond_in = np.zeros((n, WIDTH))
    cond_in[:, k * 14:(k + 1) * 14] = 2.0
    cond = D.build_condition(model, cond_in)

    def predict(z, t):
        with T.no_grad():
            return D.guided_noise(model, z, np.full(n, t), cond, w).data

    srng = np.random.default_rng(100 + k)
    out = D.ddim_sample(predict, (n, S_TOK, P_TOK), sched, 50, srng, clip_z0=8.0)
    return out.reshape(n, D_LATENT)

print("\nguidance sweep (60 samples per class, 50 deterministic steps)")
print(f"  {'w':>4}  {'assign rate':>11}  centroid errors per class")
for w in (0.0, 1.0, 2.0):
    hits = total = 0
    cent_errs = []
    for k in range(N_CLASSES):
        s = sample_class(k, w)
        assign = np.argmin(((s[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
        hits += int((assign == k).sum())
        total += len(s)
        cent_errs.append(float(np.linalg.norm(s.mean(axis=0) - means[k])))
    print(f"  {w:4.1f}  {hits / total:11.2f}  {np.round(cent_errs, 2)}")

print(
    "\nReading the table: at w=0 every class centroid lands closer to the"
    "\ntruth than a zero-filled channel would (errors < 2.40), so plain"
    "\nconditional sampling already recovers usable structure.  Raising w"
    "\npushes more samples to the correct side of the decision boundary"
    "\n(assignment rate climbs past the 0.33 chance level) but each sample"
    "\nis shoved harder along the guidance direction, so the cloud spreads"
    "\nand the centroid drifts.  Pick w by which error matters downstream."
)
