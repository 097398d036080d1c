use lmcascade::peak_alloc::PeakAlloc;

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc;

fn main() {
    std::process::exit(lmcascade::cli::run(std::env::args_os()));
}
