mod common;
mod config;
mod eval;
mod gen;
mod infer;
mod train;

use config::CliError;

const USAGE: &str = "\
usage: permset <command> [--config FILE] [--key value ...]

commands:
  gen shapes     generate a blob-scene detection dataset
  gen captcha    generate a subset-sum digit puzzle dataset
  train          train a set prediction model on a dataset
  eval           evaluate a checkpoint against a dataset
  infer          run inference on image files

Every command takes --out DIR and echoes its resolved configuration to
DIR/config.txt before doing any work. Keys may also be given in a flat
key=value file via --config; command-line flags override the file. Unknown
keys are rejected. Run `permset <command> --help` for the command's keys.
The PERMSET_DATA_ROOT environment variable, when set, resolves relative
--data paths.";

fn run() -> Result<(), CliError> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        println!("{USAGE}");
        return Ok(());
    };
    match command.as_str() {
        "gen" => {
            let Some(task) = args.get(1) else {
                return Err(CliError::new("gen needs a task: shapes or captcha"));
            };
            match task.as_str() {
                "shapes" => gen::cmd_gen_shapes(&args[2..]),
                "captcha" => gen::cmd_gen_captcha(&args[2..]),
                other => Err(CliError::new(format!("unknown gen task {other:?}"))),
            }
        }
        "train" => train::cmd_train(&args[1..]),
        "eval" => eval::cmd_eval(&args[1..]),
        "infer" => infer::cmd_infer(&args[1..]),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(CliError::new(format!("unknown command {other:?}"))),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
