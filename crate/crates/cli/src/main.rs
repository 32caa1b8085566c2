use std::process::ExitCode;

fn main() -> ExitCode {
    match mdplab_cli::app::run(std::env::args_os()) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) if e.code == 0 => {
            print!("{}", e.message);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.message.trim_end());
            ExitCode::from(e.code)
        }
    }
}
