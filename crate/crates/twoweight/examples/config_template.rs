//! Print the annotated default configuration.

fn main() {
    print!("{}", twoweight::pipeline::config_template());
}
