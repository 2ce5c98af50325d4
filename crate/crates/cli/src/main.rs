use std::process::ExitCode;

use iscf_core::bench::CountingAlloc;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() -> ExitCode {
    ExitCode::from(iscf_cli::run(std::env::args_os()))
}
