fn main() {
    println!("nowcast");
}
