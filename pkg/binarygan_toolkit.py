import argparse
import sys
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError
from superagi.tools.base_tool import BaseTool, BaseToolkit

from binarygan_logger import logger
from compute_histogram import ComputeHistogramTool
from generate_samples import GenerateSamplesTool
from postprocess_samples import PostprocessSamplesTool
from run_matrix import RunMatrixTool
from train_model import TrainModelTool


class BinaryGanToolkit(BaseToolkit):
    name: str = "BinaryGAN Toolkit"
    description: str = "Train and inspect adversarial generators with binary output neurons on binarized MNIST"

    def get_tools(self) -> List[BaseTool]:
        return [TrainModelTool(), GenerateSamplesTool(), ComputeHistogramTool(), RunMatrixTool(),
                PostprocessSamplesTool()]

    def get_env_keys(self) -> List[str]:
        return ["BINARYGAN_DATA_DIR", "BINARYGAN_LOG_LEVEL"]


def _add_schema_flags(parser: argparse.ArgumentParser, tool: BaseTool) -> None:
    for name, field in tool.args_schema.__fields__.items():
        flag = f"--{name.replace('_', '-')}"
        help_text = field.field_info.description
        if field.type_ is bool and field.allow_none:
            parser.add_argument(flag, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS,
                                help=help_text)
        elif field.type_ is bool:
            parser.add_argument(flag, action="store_true", default=argparse.SUPPRESS, help=help_text)
        else:
            parser.add_argument(flag, type=field.type_, required=field.required, default=argparse.SUPPRESS,
                                help=help_text)


def build_parser(toolkit: Optional[BinaryGanToolkit] = None) -> argparse.ArgumentParser:
    toolkit = toolkit or BinaryGanToolkit()
    parser = argparse.ArgumentParser(prog="binarygan", description=toolkit.description)
    commands = parser.add_subparsers(dest="command", required=True)
    for tool in toolkit.get_tools():
        _add_schema_flags(commands.add_parser(tool.name, help=tool.description, description=tool.description), tool)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    toolkit = BinaryGanToolkit()
    tools: Dict[str, BaseTool] = {tool.name: tool for tool in toolkit.get_tools()}
    args = vars(build_parser(toolkit).parse_args(argv))
    command = args.pop("command")
    try:
        tools[command].execute(args)
    except ValidationError as e:
        logger.error(f"Invalid arguments for '{command}':\n{e}")
        return 2
    except Exception as e:
        logger.error(f"'{command}' failed: {type(e).__name__}: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
