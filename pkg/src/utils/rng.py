import numpy as np


class RngStreams:
    """Independent generators split from one seed.

    Parameter init, stand-in skinning assets and batch shuffling each get
    their own stream, so changing the dataset size never changes the
    initial weights. Dataset seeds come from a separate branch of the same
    seed.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        root = np.random.SeedSequence(self.seed)
        init_seq, assets_seq, shuffle_seq = root.spawn(3)
        self.init = np.random.default_rng(init_seq)
        self.assets = np.random.default_rng(assets_seq)
        self.shuffle = np.random.default_rng(shuffle_seq)

    def dataset_seeds(self):
        """Seed sequences for the training and validation sets."""
        train, validation = np.random.SeedSequence(self.seed, spawn_key=(3,)).spawn(2)
        return train, validation
