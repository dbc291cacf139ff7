from .collective import BlsConfig, BlsContext, RefAlltoallv, SafetyMode, bls_init  # noqa
from .comm import Communicator, create_comm  # noqa
