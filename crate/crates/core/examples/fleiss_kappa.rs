use unihd::metrics::{fleiss_kappa, RatingsMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Three annotators labelling six claims as [hallucinatory, non-hallucinatory].
    let m = RatingsMatrix::new(vec![
        vec![3, 0],
        vec![3, 0],
        vec![0, 3],
        vec![2, 1],
        vec![0, 3],
        vec![1, 2],
    ])?;
    println!("raters {} items {} kappa {:.4}", m.raters(), m.rows().len(), fleiss_kappa(&m)?);

    let unanimous = RatingsMatrix::new(vec![vec![3, 0], vec![0, 3]])?;
    println!("unanimous kappa {:.4}", fleiss_kappa(&unanimous)?);

    match RatingsMatrix::new(vec![vec![3, 0], vec![1, 1]]) {
        Ok(_) => println!("unexpected"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
