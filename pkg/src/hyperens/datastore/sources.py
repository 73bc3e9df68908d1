from .idx import load_csv, load_idx_dataset
from .synth import synth

# offsets the test-set seed so train and test draws never coincide
TEST_SEED_OFFSET = 0x5EED


def load_data(cfg):
    """Return ``(train, test)`` datasets for a :class:`DataConfig`."""
    if cfg.source == "synth":
        train = synth(cfg.name, cfg.n, cfg.seed, **cfg.options)
        test = synth(cfg.name, cfg.n_test, cfg.seed + TEST_SEED_OFFSET, **cfg.options)
    elif cfg.source == "idx":
        n_classes = cfg.options.get("n_classes", 10)
        train = load_idx_dataset(cfg.train_path, cfg.train_labels_path, n_classes)
        test = load_idx_dataset(cfg.test_path, cfg.test_labels_path, n_classes)
    else:
        n_classes = cfg.options.get("n_classes")
        train = load_csv(cfg.train_path, cfg.label_column, n_classes)
        test = load_csv(cfg.test_path, cfg.label_column, train.n_classes)
    test.split = "test"
    return train, test
