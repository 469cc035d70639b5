from .metrics import ConfusionMatrix, OlsFit, miou, ols_fit, rmse_metric, write_correlation_data
from .report import AblationTable, ablation_report
from .schedule import EPOCH_SCHEDULE, PRETRAIN_EPOCHS, resolve_epochs
from .train import (
    DataError,
    NumericError,
    RunConfig,
    RunReport,
    evaluate_checkpoint,
    evaluate_downstream,
    finetune,
    load_finetuned,
    mae_eval_loss,
    pretrain,
)
