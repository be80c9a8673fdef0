__all__ = (
    "ADAM_BETA1",
    "ADAM_BETA2",
    "ADAM_EPSILON",
    "CHECKPOINT_MAGIC",
    "DEFAULT_SPLIT_RATIOS",
    "HITS_AT",
    "MESSAGE_MAGIC",
    "OUTPUT_DIR_ENV",
    "REFERENCE_DEFAULTS",
    "SHARED_PARAM_NAMES",
    "PRIVATE_PARAM_NAMES",
    "PARAM_NAMES",
    "DATASET_SPLIT_FILES",
    "MANIFEST_DIR_NAME",
    "MANIFEST_SUMMARY_FILENAME",
    "METRICS_FILENAME",
    "BEST_CHECKPOINT_FILENAME",
    "FINAL_CHECKPOINT_FILENAME",
    "GRADCHECK_FILENAME",
    "COMPARE_FILENAME",
)


MESSAGE_MAGIC = b"FLESTMSG1"
CHECKPOINT_MAGIC = b"FLESTCKPT1"

SHARED_PARAM_NAMES = ("e_dic", "r_dic", "w1", "w2", "w3")
"""Parameters uploaded to the server, in wire order."""
PRIVATE_PARAM_NAMES = ("e_loading", "r_loading")
"""Parameters that never leave a client."""
PARAM_NAMES = SHARED_PARAM_NAMES + PRIVATE_PARAM_NAMES

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

HITS_AT = (1, 3, 10)

DEFAULT_SPLIT_RATIOS = (0.9, 0.05, 0.05)
"""(train, valid, test) share of every client shard."""


OUTPUT_DIR_ENV = "FLEST_OUTPUT_DIR"

DATASET_SPLIT_FILES = ("train.txt", "valid.txt", "test.txt")
MANIFEST_DIR_NAME = "manifests"
MANIFEST_SUMMARY_FILENAME = "summary.yml"
METRICS_FILENAME = "metrics.jsonl"
BEST_CHECKPOINT_FILENAME = "best.ckpt"
FINAL_CHECKPOINT_FILENAME = "final.ckpt"
GRADCHECK_FILENAME = "gradcheck.json"
COMPARE_FILENAME = "compare.json"

REFERENCE_DEFAULTS = {
    "rank": 200,
    "sparsity": 0.5,
    "batch_size": 128,
    "lr": 0.0005,
    "dropout": 0.3,
    "local_epochs": 3,
    "rounds_max": 300,
}
"""Implementation detail values of the reference experiments."""
