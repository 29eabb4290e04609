from .log_util import *
from .error_util import *
from .file_util import *
from .dtype_util import *
from .terminal_util import *
from .linalg_util import *
from .objective_util import *
from .treebank_util import *
from .probe_util import *
from .embedding_util import *
from .checkpoint_util import *
from .train_util import *
from .eval_util import *
from .analysis_util import *
from .config_util import *
from .experiment_util import *
from .download_util import *
