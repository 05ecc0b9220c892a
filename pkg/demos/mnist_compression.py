"""Train on the bundled MNIST sample, then compress to quantized nets.

Compares one MAP network against an ensemble of sampled networks at equal
storage per member (one bit per weight), and reports the size ratio
against the float64 posterior logits.
"""

import numpy as np

from bqn import TrainConfig, compress, evaluate, mlp, train
from bqn.io import load_idx, pack_weights, packed_size_bits

tr = load_idx("tests/data/mnist5k-train-images-idx3-ubyte.gz", "tests/data/mnist5k-train-labels-idx1-ubyte.gz")
te = load_idx("tests/data/mnist5k-test-images-idx3-ubyte.gz", "tests/data/mnist5k-test-labels-idx1-ubyte.gz")
x, xt = tr.x.reshape(len(tr.x), -1), te.x.reshape(len(te.x), -1)

net = mlp([784, 256, 10])
state = train(net, TrainConfig(epochs=10, batch_size=100, lr0=0.01), x, tr.y,
              metrics=lambda r: print(r))
logit_bits = 64 * sum(state.params["layers"][i]["logits"].size for i in net.weight_layers)
for mode, S in (("ai", None), ("map", 1), ("mc", 1), ("mc", 5), ("mc", 20)):
    r = evaluate(net, state.params, xt, te.y, mode, S=S or 1)
    bits = 0 if mode == "ai" else packed_size_bits(pack_weights(net, compress(net, state.params, mode, S)))
    size = f"{bits / logit_bits:.4f} of logits" if bits else "full posterior"
    print(f"{mode:>3} S={S}: error {r.error_rate:.3f}  NLL {r.nll_nats:.3f}  size {size}")
