import json
import logging
import logging.config
import os


def __create_logger_instance() -> logging.Logger:
    with open(os.path.join(os.path.dirname(__file__), 'logging.json'), 'r') as file:
        config = json.load(file)

    # The file handler doesn't create its folder
    for handler in config['handlers'].values():
        if filename := handler.get('filename'):
            os.makedirs(os.path.dirname(filename) or '.', exist_ok=True)

    logging.config.dictConfig(config)

    return logging.getLogger('standard')


logger = __create_logger_instance()
